#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace natpatch {

/// Dense row-major tensor of doubles.  Images are stored channel-major as
/// (C, H, W); network batches as (N, C, H, W).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
    Tensor(std::initializer_list<std::size_t> shape, double fill = 0.0)
        : Tensor(std::vector<std::size_t>(shape), fill) {}

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t c, std::size_t h, std::size_t w) {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }
    double at(std::size_t c, std::size_t h, std::size_t w) const {
        return data_[(c * shape_[1] + h) * shape_[2] + w];
    }
    double& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    double at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    /// Same data, new shape; element counts must agree.
    Tensor reshaped(std::vector<std::size_t> shape) const;

    /// Sample `index` of a batch as a tensor of rank-1 lower.
    Tensor slice(std::size_t index) const;
    void set_slice(std::size_t index, const Tensor& value);

    void fill(double value);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double scale);

    double sum() const;
    double min() const;
    double max() const;

    bool operator==(const Tensor& other) const = default;

    static std::size_t count(const std::vector<std::size_t>& shape);

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);

/// Stack equally-shaped tensors along a new leading axis.
Tensor stack(const std::vector<Tensor>& items);

std::string shape_string(const std::vector<std::size_t>& shape);

void clamp_inplace(Tensor& t, double lo, double hi);

}  // namespace natpatch
