#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace natpatch {

/// Seeded random source with a serializable state.  Sampling routines are
/// written out here (instead of using the std distributions) so streams are
/// reproducible across standard library implementations and can be resumed
/// from a checkpoint without hidden cached values.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    /// Independent stream for a named purpose, derived from a run seed.
    static Rng derive(std::uint64_t seed, std::string_view purpose);

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi);
    double normal();
    /// Uniform integer in [0, n).
    std::size_t index(std::size_t n);

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::swap(items[i - 1], items[index(i)]);
        }
    }

    std::string save_state() const;
    void load_state(const std::string& state);

    bool operator==(const Rng& other) const { return engine_ == other.engine_; }

private:
    std::mt19937_64 engine_;
};

std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t hash = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text, std::uint64_t hash = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::span<const double> values, std::uint64_t hash = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace natpatch
