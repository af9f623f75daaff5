#include "natpatch/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <Eigen/Dense>

namespace natpatch::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

void require_rank(const Tensor& t, std::size_t rank, const char* where) {
    if (t.rank() != rank) {
        throw std::invalid_argument(std::string(where) + ": expected rank " + std::to_string(rank) +
                                    " tensor, got " + shape_string(t.shape()));
    }
}

}  // namespace

double softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void init_normal(Tensor& t, Rng& rng, double mean, double stddev) {
    for (double& v : t.values()) v = mean + stddev * rng.normal();
}

// ---------------------------------------------------------------------------

void im2col(const double* image, std::size_t channels, std::size_t height, std::size_t width,
            const ConvGeometry& g, double* columns) {
    const std::size_t oh = g.out_size(height);
    const std::size_t ow = g.out_size(width);
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        const double* plane = image + c * height * width;
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
                double* out = columns + row * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
                        std::fill_n(out + y * ow, ow, 0.0);
                        continue;
                    }
                    for (std::size_t x = 0; x < ow; ++x) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) - pad;
                        out[y * ow + x] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                                              ? 0.0
                                              : plane[static_cast<std::size_t>(iy) * width +
                                                      static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

void col2im(const double* columns, std::size_t channels, std::size_t height, std::size_t width,
            const ConvGeometry& g, double* image) {
    const std::size_t oh = g.out_size(height);
    const std::size_t ow = g.out_size(width);
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        double* plane = image + c * height * width;
        for (std::size_t ky = 0; ky < g.kernel; ++ky) {
            for (std::size_t kx = 0; kx < g.kernel; ++kx, ++row) {
                const double* in = columns + row * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * g.stride + kx) - pad;
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
                        plane[static_cast<std::size_t>(iy) * width + static_cast<std::size_t>(ix)] +=
                            in[y * ow + x];
                    }
                }
            }
        }
    }
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvGeometry& g) {
    require_rank(input, 3, "conv2d");
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = weight.dim(0);
    if (weight.dim(1) != cin || weight.dim(2) != g.kernel || weight.dim(3) != g.kernel) {
        throw std::invalid_argument("conv2d: weight " + shape_string(weight.shape()) +
                                    " does not match input " + shape_string(input.shape()));
    }
    if (h + 2 * g.pad < g.kernel || w + 2 * g.pad < g.kernel) {
        throw std::invalid_argument("conv2d: input smaller than kernel");
    }
    const std::size_t oh = g.out_size(h), ow = g.out_size(w);
    const std::size_t k = cin * g.kernel * g.kernel;
    std::vector<double> cols(k * oh * ow);
    im2col(input.data(), cin, h, w, g, cols.data());

    Tensor out({cout, oh, ow});
    MapMatrix o(out.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(oh * ow));
    o.noalias() = ConstMapMatrix(weight.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k)) *
                  ConstMapMatrix(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(oh * ow));
    if (!bias.empty()) {
        for (std::size_t c = 0; c < cout; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias[c];
    }
    return out;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const std::vector<std::size_t>& input_shape, const ConvGeometry& g) {
    const std::size_t cin = input_shape[0], h = input_shape[1], w = input_shape[2];
    const std::size_t cout = weight.dim(0);
    const std::size_t oh = grad_out.dim(1), ow = grad_out.dim(2);
    const std::size_t k = cin * g.kernel * g.kernel;
    std::vector<double> cols(k * oh * ow);
    MapMatrix c(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(oh * ow));
    c.noalias() =
        ConstMapMatrix(weight.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k)).transpose() *
        ConstMapMatrix(grad_out.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(oh * ow));
    Tensor grad_in(input_shape);
    col2im(cols.data(), cin, h, w, g, grad_in.data());
    return grad_in;
}

void conv2d_backward_params(const Tensor& grad_out, const Tensor& input, const ConvGeometry& g,
                            Tensor& grad_weight, Tensor* grad_bias) {
    const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t cout = grad_out.dim(0);
    const std::size_t oh = grad_out.dim(1), ow = grad_out.dim(2);
    const std::size_t k = cin * g.kernel * g.kernel;
    std::vector<double> cols(k * oh * ow);
    im2col(input.data(), cin, h, w, g, cols.data());
    ConstMapMatrix go(grad_out.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(oh * ow));
    MapMatrix gw(grad_weight.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(k));
    gw.noalias() += go * ConstMapMatrix(cols.data(), static_cast<Eigen::Index>(k),
                                        static_cast<Eigen::Index>(oh * ow)).transpose();
    if (grad_bias) {
        for (std::size_t c = 0; c < cout; ++c) (*grad_bias)[c] += go.row(static_cast<Eigen::Index>(c)).sum();
    }
}

// ---------------------------------------------------------------------------

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, ConvGeometry geometry, bool bias)
    : geometry_(geometry),
      has_bias_(bias),
      weight_({out_channels, in_channels, geometry.kernel, geometry.kernel}),
      bias_(bias ? Tensor({out_channels}) : Tensor()) {}

nlohmann::json Conv2d::describe() const {
    return {{"kind", kind()},           {"in", weight_.dim(1)},         {"out", weight_.dim(0)},
            {"kernel", geometry_.kernel}, {"stride", geometry_.stride}, {"pad", geometry_.pad},
            {"bias", has_bias_}};
}

std::vector<Tensor*> Conv2d::parameters() {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
}

std::vector<const Tensor*> Conv2d::parameters() const {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
}

Tensor Conv2d::forward(const Tensor& x, Cache& cache) const {
    require_rank(x, 4, "Conv2d");
    const std::size_t n = x.dim(0);
    std::vector<Tensor> outs;
    outs.reserve(n);
    for (std::size_t i = 0; i < n; ++i) outs.push_back(conv2d(x.slice(i), weight_, bias_, geometry_));
    cache.saved = {x};
    return stack(outs);
}

Tensor Conv2d::backward(const Tensor& grad_out, const Cache& cache,
                        std::span<Tensor> param_grads) const {
    const Tensor& x = cache.saved.at(0);
    const std::vector<std::size_t> in_shape(x.shape().begin() + 1, x.shape().end());
    Tensor grad_in(x.shape());
    for (std::size_t i = 0; i < x.dim(0); ++i) {
        const Tensor go = grad_out.slice(i);
        grad_in.set_slice(i, conv2d_backward_input(go, weight_, in_shape, geometry_));
        if (!param_grads.empty()) {
            conv2d_backward_params(go, x.slice(i), geometry_, param_grads[0],
                                   has_bias_ ? &param_grads[1] : nullptr);
        }
    }
    return grad_in;
}

// ---------------------------------------------------------------------------

ConvTranspose2d::ConvTranspose2d(std::size_t in_channels, std::size_t out_channels,
                                 ConvGeometry geometry, bool bias)
    : geometry_(geometry),
      has_bias_(bias),
      weight_({in_channels, out_channels, geometry.kernel, geometry.kernel}),
      bias_(bias ? Tensor({out_channels}) : Tensor()) {}

nlohmann::json ConvTranspose2d::describe() const {
    return {{"kind", kind()},           {"in", weight_.dim(0)},         {"out", weight_.dim(1)},
            {"kernel", geometry_.kernel}, {"stride", geometry_.stride}, {"pad", geometry_.pad},
            {"bias", has_bias_}};
}

std::vector<Tensor*> ConvTranspose2d::parameters() {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
}

std::vector<const Tensor*> ConvTranspose2d::parameters() const {
    if (has_bias_) return {&weight_, &bias_};
    return {&weight_};
}

Tensor ConvTranspose2d::forward(const Tensor& x, Cache& cache) const {
    require_rank(x, 4, "ConvTranspose2d");
    const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (cin != weight_.dim(0)) {
        throw std::invalid_argument("ConvTranspose2d: input " + shape_string(x.shape()) +
                                    " does not match weight " + shape_string(weight_.shape()));
    }
    const std::size_t cout = weight_.dim(1);
    const auto& g = geometry_;
    const std::size_t oh = (h - 1) * g.stride + g.kernel - 2 * g.pad;
    const std::size_t ow = (w - 1) * g.stride + g.kernel - 2 * g.pad;
    const std::size_t k = cout * g.kernel * g.kernel;

    Tensor out({n, cout, oh, ow});
    std::vector<double> cols(k * h * w);
    const ConstMapMatrix wm(weight_.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < n; ++i) {
        MapMatrix c(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(h * w));
        c.noalias() = wm.transpose() * ConstMapMatrix(x.data() + i * cin * h * w,
                                                      static_cast<Eigen::Index>(cin),
                                                      static_cast<Eigen::Index>(h * w));
        double* o = out.data() + i * cout * oh * ow;
        col2im(cols.data(), cout, oh, ow, g, o);
        if (has_bias_) {
            for (std::size_t ch = 0; ch < cout; ++ch) {
                for (std::size_t p = 0; p < oh * ow; ++p) o[ch * oh * ow + p] += bias_[ch];
            }
        }
    }
    cache.saved = {x};
    return out;
}

Tensor ConvTranspose2d::backward(const Tensor& grad_out, const Cache& cache,
                                 std::span<Tensor> param_grads) const {
    const Tensor& x = cache.saved.at(0);
    const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = weight_.dim(1);
    const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
    const std::size_t k = cout * geometry_.kernel * geometry_.kernel;

    Tensor grad_in(x.shape());
    std::vector<double> cols(k * h * w);
    const ConstMapMatrix wm(weight_.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < n; ++i) {
        const double* go = grad_out.data() + i * cout * oh * ow;
        im2col(go, cout, oh, ow, geometry_, cols.data());
        const ConstMapMatrix c(cols.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(h * w));
        MapMatrix gi(grad_in.data() + i * cin * h * w, static_cast<Eigen::Index>(cin),
                     static_cast<Eigen::Index>(h * w));
        gi.noalias() = wm * c;
        if (!param_grads.empty()) {
            MapMatrix gw(param_grads[0].data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(k));
            gw.noalias() += ConstMapMatrix(x.data() + i * cin * h * w, static_cast<Eigen::Index>(cin),
                                           static_cast<Eigen::Index>(h * w)) *
                            c.transpose();
            if (has_bias_) {
                for (std::size_t ch = 0; ch < cout; ++ch) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < oh * ow; ++p) s += go[ch * oh * ow + p];
                    param_grads[1][ch] += s;
                }
            }
        }
    }
    return grad_in;
}

// ---------------------------------------------------------------------------

BatchNorm2d::BatchNorm2d(std::size_t channels, double momentum, double eps)
    : momentum_(momentum),
      eps_(eps),
      gamma_({channels}, 1.0),
      beta_({channels}, 0.0),
      running_mean_({channels}, 0.0),
      running_var_({channels}, 1.0) {}

nlohmann::json BatchNorm2d::describe() const {
    return {{"kind", kind()}, {"channels", gamma_.size()}, {"momentum", momentum_}, {"eps", eps_}};
}

Tensor BatchNorm2d::forward(const Tensor& x, Cache& cache) const {
    require_rank(x, 4, "BatchNorm2d");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    Tensor inv_std({c});
    for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = 1.0 / std::sqrt(running_var_[ch] + eps_);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* in = x.data() + (i * c + ch) * hw;
            double* o = out.data() + (i * c + ch) * hw;
            const double scale = gamma_[ch] * inv_std[ch];
            for (std::size_t p = 0; p < hw; ++p) o[p] = (in[p] - running_mean_[ch]) * scale + beta_[ch];
        }
    }
    // Inference mode: xhat is recomputable, mark with an empty third slot.
    Tensor xhat(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* in = x.data() + (i * c + ch) * hw;
            double* xh = xhat.data() + (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) xh[p] = (in[p] - running_mean_[ch]) * inv_std[ch];
        }
    }
    cache.saved = {std::move(xhat), std::move(inv_std), Tensor({1}, 0.0)};
    return out;
}

Tensor BatchNorm2d::forward_train(const Tensor& x, Cache& cache, bool update_stats) {
    require_rank(x, 4, "BatchNorm2d");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    const double count = static_cast<double>(n * hw);
    Tensor out(x.shape());
    Tensor xhat(x.shape());
    Tensor inv_std({c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* in = x.data() + (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) mean += in[p];
        }
        mean /= count;
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* in = x.data() + (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) var += (in[p] - mean) * (in[p] - mean);
        }
        var /= count;
        inv_std[ch] = 1.0 / std::sqrt(var + eps_);
        for (std::size_t i = 0; i < n; ++i) {
            const double* in = x.data() + (i * c + ch) * hw;
            double* xh = xhat.data() + (i * c + ch) * hw;
            double* o = out.data() + (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) {
                xh[p] = (in[p] - mean) * inv_std[ch];
                o[p] = gamma_[ch] * xh[p] + beta_[ch];
            }
        }
        if (!update_stats) continue;
        const double unbiased = count > 1 ? var * count / (count - 1) : var;
        running_mean_[ch] = (1 - momentum_) * running_mean_[ch] + momentum_ * mean;
        running_var_[ch] = (1 - momentum_) * running_var_[ch] + momentum_ * unbiased;
    }
    cache.saved = {std::move(xhat), std::move(inv_std), Tensor({1}, 1.0)};
    return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out, const Cache& cache,
                             std::span<Tensor> param_grads) const {
    const Tensor& xhat = cache.saved.at(0);
    const Tensor& inv_std = cache.saved.at(1);
    const bool batch_stats = cache.saved.at(2)[0] != 0.0;
    const std::size_t n = xhat.dim(0), c = xhat.dim(1), hw = xhat.dim(2) * xhat.dim(3);
    const double count = static_cast<double>(n * hw);
    Tensor grad_in(xhat.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* g = grad_out.data() + (i * c + ch) * hw;
            const double* xh = xhat.data() + (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) {
                sum_g += g[p];
                sum_gx += g[p] * xh[p];
            }
        }
        if (!param_grads.empty()) {
            param_grads[0][ch] += sum_gx;
            param_grads[1][ch] += sum_g;
        }
        const double scale = gamma_[ch] * inv_std[ch];
        for (std::size_t i = 0; i < n; ++i) {
            const double* g = grad_out.data() + (i * c + ch) * hw;
            const double* xh = xhat.data() + (i * c + ch) * hw;
            double* gi = grad_in.data() + (i * c + ch) * hw;
            for (std::size_t p = 0; p < hw; ++p) {
                gi[p] = batch_stats ? scale * (g[p] - sum_g / count - xh[p] * sum_gx / count)
                                    : scale * g[p];
            }
        }
    }
    return grad_in;
}

// ---------------------------------------------------------------------------

double activate(Activation fn, double x, double slope) {
    switch (fn) {
        case Activation::relu: return x > 0 ? x : 0.0;
        case Activation::leaky_relu: return x > 0 ? x : slope * x;
        case Activation::tanh: return std::tanh(x);
        case Activation::sigmoid: return sigmoid(x);
        case Activation::identity: return x;
    }
    return x;
}

double activate_grad(Activation fn, double x, double y, double slope) {
    switch (fn) {
        case Activation::relu: return x > 0 ? 1.0 : 0.0;
        case Activation::leaky_relu: return x > 0 ? 1.0 : slope;
        case Activation::tanh: return 1.0 - y * y;
        case Activation::sigmoid: return y * (1.0 - y);
        case Activation::identity: return 1.0;
    }
    return 1.0;
}

std::string ActivationLayer::kind() const {
    switch (fn_) {
        case Activation::relu: return "relu";
        case Activation::leaky_relu: return "leaky_relu";
        case Activation::tanh: return "tanh";
        case Activation::sigmoid: return "sigmoid";
        case Activation::identity: return "identity";
    }
    return "identity";
}

nlohmann::json ActivationLayer::describe() const {
    nlohmann::json j{{"kind", kind()}};
    if (fn_ == Activation::leaky_relu) j["slope"] = slope_;
    return j;
}

Tensor ActivationLayer::forward(const Tensor& x, Cache& cache) const {
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = activate(fn_, x[i], slope_);
    cache.saved = {x, y};
    return y;
}

Tensor ActivationLayer::backward(const Tensor& grad_out, const Cache& cache, std::span<Tensor>) const {
    const Tensor& x = cache.saved.at(0);
    const Tensor& y = cache.saved.at(1);
    Tensor g(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = grad_out[i] * activate_grad(fn_, x[i], y[i], slope_);
    return g;
}

// ---------------------------------------------------------------------------

Sequential::Sequential(const Sequential& other) {
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
    if (this != &other) {
        Sequential copy(other);
        layers_ = std::move(copy.layers_);
    }
    return *this;
}

Tensor Sequential::forward(const Tensor& x, Tape& tape) const {
    tape.assign(layers_.size(), Cache{});
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) h = layers_[i]->forward(h, tape[i]);
    return h;
}

Tensor Sequential::forward_train(const Tensor& x, Tape& tape, bool update_stats) {
    tape.assign(layers_.size(), Cache{});
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) h = layers_[i]->forward_train(h, tape[i], update_stats);
    return h;
}

Tensor Sequential::backward(const Tensor& grad_out, const Tape& tape, std::vector<Tensor>* grads) const {
    if (tape.size() != layers_.size()) {
        throw std::logic_error("Sequential::backward called without a matching forward tape");
    }
    std::vector<std::size_t> offsets(layers_.size() + 1, 0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        offsets[i + 1] = offsets[i] + static_cast<const Layer&>(*layers_[i]).parameters().size();
    }
    if (grads && grads->size() != offsets.back()) {
        throw std::invalid_argument("gradient buffer does not match parameter count");
    }
    Tensor g = grad_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
        std::span<Tensor> pg;
        if (grads) pg = std::span<Tensor>(grads->data() + offsets[i], offsets[i + 1] - offsets[i]);
        g = layers_[i]->backward(g, tape[i], pg);
    }
    return g;
}

std::vector<Tensor*> Sequential::parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
        auto p = l->parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

std::vector<const Tensor*> Sequential::parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers_) {
        auto p = static_cast<const Layer&>(*l).parameters();
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

std::vector<Tensor*> Sequential::buffers() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
        auto b = l->buffers();
        out.insert(out.end(), b.begin(), b.end());
    }
    return out;
}

std::vector<const Tensor*> Sequential::buffers() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers_) {
        auto b = static_cast<const Layer&>(*l).buffers();
        out.insert(out.end(), b.begin(), b.end());
    }
    return out;
}

std::vector<Tensor> Sequential::zero_gradients() const {
    std::vector<Tensor> out;
    for (const Tensor* p : parameters()) out.emplace_back(p->shape());
    return out;
}

nlohmann::json Sequential::describe() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : layers_) layers.push_back(l->describe());
    return layers;
}

std::uint64_t Sequential::digest() const {
    std::uint64_t h = fnv1a64(std::string_view{});
    for (const Tensor* p : parameters()) h = fnv1a64(p->values(), h);
    for (const Tensor* b : buffers()) h = fnv1a64(b->values(), h);
    return h;
}

// ---------------------------------------------------------------------------

Adam::Adam(AdamOptions options, const std::vector<const Tensor*>& params) : options_(options) {
    for (const Tensor* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
    }
}

void Adam::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw std::invalid_argument("Adam::step parameter count mismatch");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = grads[k];
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = options_.beta1 * m[i] + (1 - options_.beta1) * g[i];
            v[i] = options_.beta2 * v[i] + (1 - options_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
        }
    }
}

void Adam::export_to(Archive& archive, const std::string& prefix) const {
    archive.meta[prefix] = {{"lr", options_.lr},     {"beta1", options_.beta1}, {"beta2", options_.beta2},
                            {"eps", options_.eps},   {"t", t_},                 {"count", m_.size()}};
    for (std::size_t k = 0; k < m_.size(); ++k) {
        archive.tensors[prefix + ".m." + std::to_string(k)] = m_[k];
        archive.tensors[prefix + ".v." + std::to_string(k)] = v_[k];
    }
}

void Adam::import_from(const Archive& archive, const std::string& prefix) {
    const auto& meta = archive.meta.at(prefix);
    options_.lr = meta.at("lr");
    options_.beta1 = meta.at("beta1");
    options_.beta2 = meta.at("beta2");
    options_.eps = meta.at("eps");
    t_ = meta.at("t");
    const std::size_t count = meta.at("count");
    m_.clear();
    v_.clear();
    for (std::size_t k = 0; k < count; ++k) {
        m_.push_back(archive.tensor(prefix + ".m." + std::to_string(k)));
        v_.push_back(archive.tensor(prefix + ".v." + std::to_string(k)));
    }
}

}  // namespace natpatch::nn
