#include "natpatch/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace natpatch {

std::size_t Tensor::count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(count(shape_), fill) {}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    if (count(shape) != size()) {
        throw std::invalid_argument("cannot reshape " + shape_string(shape_) + " to " +
                                    shape_string(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

Tensor Tensor::slice(std::size_t index) const {
    if (rank() == 0 || index >= shape_[0]) {
        throw std::out_of_range("slice index out of range");
    }
    std::vector<std::size_t> inner(shape_.begin() + 1, shape_.end());
    Tensor out(inner);
    const std::size_t n = out.size();
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(index * n), n, out.data_.begin());
    return out;
}

void Tensor::set_slice(std::size_t index, const Tensor& value) {
    if (rank() == 0 || index >= shape_[0]) {
        throw std::out_of_range("slice index out of range");
    }
    const std::size_t n = size() / shape_[0];
    if (value.size() != n) {
        throw std::invalid_argument("slice size mismatch");
    }
    std::copy(value.data_.begin(), value.data_.end(),
              data_.begin() + static_cast<std::ptrdiff_t>(index * n));
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other) {
    if (other.size() != size()) {
        throw std::invalid_argument("tensor size mismatch in +=");
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    if (other.size() != size()) {
        throw std::invalid_argument("tensor size mismatch in -=");
    }
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double scale) {
    for (double& v : data_) v *= scale;
    return *this;
}

double Tensor::sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

double Tensor::min() const {
    return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end());
}

double Tensor::max() const {
    return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end());
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

Tensor stack(const std::vector<Tensor>& items) {
    if (items.empty()) {
        throw std::invalid_argument("cannot stack an empty list");
    }
    std::vector<std::size_t> shape{items.size()};
    shape.insert(shape.end(), items.front().shape().begin(), items.front().shape().end());
    Tensor out(shape);
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (items[i].shape() != items.front().shape()) {
            throw std::invalid_argument("cannot stack tensors of different shapes");
        }
        out.set_slice(i, items[i]);
    }
    return out;
}

std::string shape_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ')';
    return os.str();
}

void clamp_inplace(Tensor& t, double lo, double hi) {
    for (double& v : t.values()) v = std::clamp(v, lo, hi);
}

}  // namespace natpatch
