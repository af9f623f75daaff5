#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iterator>
#include <string>

#include <unistd.h>

#include "natpatch/rng.hpp"
#include "natpatch/tensor.hpp"

namespace testing {

inline natpatch::Tensor random_tensor(std::vector<std::size_t> shape, natpatch::Rng& rng, double lo = 0.0,
                                      double hi = 1.0) {
    natpatch::Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

/// |a - n| / max(|a|, |n|) where the larger magnitude exceeds `floor`,
/// otherwise the absolute difference divided by `floor`.
inline double relative_error(double a, double n, double floor = 1e-6) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline double central_difference(const std::function<double(const natpatch::Tensor&)>& f, natpatch::Tensor x,
                                 std::size_t index, double step) {
    const double v = x[index];
    x[index] = v + step;
    const double up = f(x);
    x[index] = v - step;
    const double down = f(x);
    return (up - down) / (2.0 * step);
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("natpatch_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace testing
