#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "natpatch/archive.hpp"
#include "natpatch/rng.hpp"
#include "natpatch/tensor.hpp"

/// Minimal layer library with hand-written backward passes.
///
/// Layers are immutable during inference: activations needed by the backward
/// pass are written to a caller-owned Cache, so a frozen network can be run
/// from several threads at once.  Parameter gradients are accumulated into a
/// caller-owned buffer that mirrors parameters(); passing an empty span skips
/// the parameter-gradient work entirely (used for frozen networks).
namespace natpatch::nn {

struct Cache {
    std::vector<Tensor> saved;
};

class Layer {
public:
    virtual ~Layer() = default;

    virtual std::string kind() const = 0;
    virtual nlohmann::json describe() const = 0;
    virtual std::unique_ptr<Layer> clone() const = 0;

    virtual Tensor forward(const Tensor& x, Cache& cache) const = 0;
    /// Training-mode forward; may update running statistics.
    virtual Tensor forward_train(const Tensor& x, Cache& cache, bool update_stats = true) {
        (void)update_stats;
        return forward(x, cache);
    }
    virtual Tensor backward(const Tensor& grad_out, const Cache& cache,
                            std::span<Tensor> param_grads) const = 0;

    virtual std::vector<Tensor*> parameters() { return {}; }
    virtual std::vector<const Tensor*> parameters() const { return {}; }
    /// Non-trainable state that is still part of a checkpoint.
    virtual std::vector<Tensor*> buffers() { return {}; }
    virtual std::vector<const Tensor*> buffers() const { return {}; }
};

// ---------------------------------------------------------------------------
// Convolution primitives (single sample, CHW)

struct ConvGeometry {
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t pad = 0;

    std::size_t out_size(std::size_t in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

/// Unfold (C, H, W) into a (C*k*k, Ho*Wo) row-major matrix.
void im2col(const double* image, std::size_t channels, std::size_t height, std::size_t width,
            const ConvGeometry& g, double* columns);
/// Adjoint of im2col: accumulates columns back into a zero-initialized image.
void col2im(const double* columns, std::size_t channels, std::size_t height, std::size_t width,
            const ConvGeometry& g, double* image);

/// weight: (Cout, Cin, k, k); bias: (Cout) or empty; input: (Cin, H, W).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, const ConvGeometry& g);
Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const std::vector<std::size_t>& input_shape, const ConvGeometry& g);
void conv2d_backward_params(const Tensor& grad_out, const Tensor& input, const ConvGeometry& g,
                            Tensor& grad_weight, Tensor* grad_bias);

// ---------------------------------------------------------------------------
// Layers (batch tensors, NCHW)

class Conv2d final : public Layer {
public:
    Conv2d(std::size_t in_channels, std::size_t out_channels, ConvGeometry geometry, bool bias = true);

    std::string kind() const override { return "conv2d"; }
    nlohmann::json describe() const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

    Tensor forward(const Tensor& x, Cache& cache) const override;
    Tensor backward(const Tensor& grad_out, const Cache& cache,
                    std::span<Tensor> param_grads) const override;

    std::vector<Tensor*> parameters() override;
    std::vector<const Tensor*> parameters() const override;

    Tensor& weight() { return weight_; }
    Tensor& bias() { return bias_; }
    const ConvGeometry& geometry() const { return geometry_; }

private:
    ConvGeometry geometry_;
    bool has_bias_;
    Tensor weight_;
    Tensor bias_;
};

class ConvTranspose2d final : public Layer {
public:
    ConvTranspose2d(std::size_t in_channels, std::size_t out_channels, ConvGeometry geometry,
                    bool bias = true);

    std::string kind() const override { return "conv_transpose2d"; }
    nlohmann::json describe() const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ConvTranspose2d>(*this); }

    Tensor forward(const Tensor& x, Cache& cache) const override;
    Tensor backward(const Tensor& grad_out, const Cache& cache,
                    std::span<Tensor> param_grads) const override;

    std::vector<Tensor*> parameters() override;
    std::vector<const Tensor*> parameters() const override;

    /// Weight layout is (Cin, Cout, k, k).
    Tensor& weight() { return weight_; }
    Tensor& bias() { return bias_; }

private:
    ConvGeometry geometry_;
    bool has_bias_;
    Tensor weight_;
    Tensor bias_;
};

class BatchNorm2d final : public Layer {
public:
    explicit BatchNorm2d(std::size_t channels, double momentum = 0.1, double eps = 1e-5);

    std::string kind() const override { return "batch_norm2d"; }
    nlohmann::json describe() const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm2d>(*this); }

    /// Uses running statistics.
    Tensor forward(const Tensor& x, Cache& cache) const override;
    /// Uses batch statistics and, if asked, updates the running estimates.
    Tensor forward_train(const Tensor& x, Cache& cache, bool update_stats = true) override;
    Tensor backward(const Tensor& grad_out, const Cache& cache,
                    std::span<Tensor> param_grads) const override;

    std::vector<Tensor*> parameters() override { return {&gamma_, &beta_}; }
    std::vector<const Tensor*> parameters() const override { return {&gamma_, &beta_}; }
    std::vector<Tensor*> buffers() override { return {&running_mean_, &running_var_}; }
    std::vector<const Tensor*> buffers() const override { return {&running_mean_, &running_var_}; }

    Tensor& gamma() { return gamma_; }

private:
    double momentum_;
    double eps_;
    Tensor gamma_;
    Tensor beta_;
    Tensor running_mean_;
    Tensor running_var_;
};

enum class Activation { relu, leaky_relu, tanh, sigmoid, identity };

class ActivationLayer final : public Layer {
public:
    explicit ActivationLayer(Activation fn, double slope = 0.2) : fn_(fn), slope_(slope) {}

    std::string kind() const override;
    nlohmann::json describe() const override;
    std::unique_ptr<Layer> clone() const override { return std::make_unique<ActivationLayer>(*this); }

    Tensor forward(const Tensor& x, Cache& cache) const override;
    Tensor backward(const Tensor& grad_out, const Cache& cache,
                    std::span<Tensor> param_grads) const override;

private:
    Activation fn_;
    double slope_;
};

double activate(Activation fn, double x, double slope = 0.2);
/// Derivative expressed through input x and output y.
double activate_grad(Activation fn, double x, double y, double slope = 0.2);

// ---------------------------------------------------------------------------

using Tape = std::vector<Cache>;

class Sequential {
public:
    Sequential() = default;
    Sequential(const Sequential& other);
    Sequential& operator=(const Sequential& other);
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    template <typename L, typename... Args>
    L& add(Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L& ref = *layer;
        layers_.push_back(std::move(layer));
        return ref;
    }

    std::size_t size() const { return layers_.size(); }
    Layer& layer(std::size_t i) { return *layers_.at(i); }
    const Layer& layer(std::size_t i) const { return *layers_.at(i); }

    Tensor forward(const Tensor& x, Tape& tape) const;
    Tensor forward_train(const Tensor& x, Tape& tape, bool update_stats = true);
    /// Accumulates into `grads` (aligned with parameters()) when non-null.
    Tensor backward(const Tensor& grad_out, const Tape& tape, std::vector<Tensor>* grads) const;

    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    std::vector<Tensor*> buffers();
    std::vector<const Tensor*> buffers() const;

    /// Zero tensors shaped like parameters().
    std::vector<Tensor> zero_gradients() const;

    nlohmann::json describe() const;
    /// Digest over parameters and buffers.
    std::uint64_t digest() const;

private:
    std::vector<std::unique_ptr<Layer>> layers_;
};

// ---------------------------------------------------------------------------

struct AdamOptions {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(AdamOptions options, const std::vector<const Tensor*>& params);

    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads);

    const AdamOptions& options() const { return options_; }
    void set_lr(double lr) { options_.lr = lr; }
    std::size_t steps() const { return t_; }

    void export_to(Archive& archive, const std::string& prefix) const;
    void import_from(const Archive& archive, const std::string& prefix);

private:
    AdamOptions options_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
};

/// Draw every element from N(mean, stddev).
void init_normal(Tensor& t, Rng& rng, double mean, double stddev);

/// Numerically stable log(1 + exp(x)).
double softplus(double x);
double sigmoid(double x);

}  // namespace natpatch::nn
