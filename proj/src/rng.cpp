#include "natpatch/rng.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace natpatch {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

Rng Rng::derive(std::uint64_t seed, std::string_view purpose) {
    return Rng(splitmix64(seed ^ fnv1a64(purpose)));
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    // Box-Muller; the second variate is discarded so the state stays explicit.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
    if (n == 0) throw std::invalid_argument("Rng::index on empty range");
    // Rejection sampling keeps the result unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r = engine_();
    while (r >= limit) r = engine_();
    return static_cast<std::size_t>(r % n);
}

std::string Rng::save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::load_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (!is) throw std::runtime_error("malformed random state");
}

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t hash) {
    for (std::byte b : bytes) {
        hash ^= static_cast<std::uint64_t>(b);
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t hash) {
    return fnv1a64(std::as_bytes(std::span(text.data(), text.size())), hash);
}

std::uint64_t fnv1a64(std::span<const double> values, std::uint64_t hash) {
    return fnv1a64(std::as_bytes(values), hash);
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

}  // namespace natpatch
