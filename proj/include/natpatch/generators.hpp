#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "natpatch/nn.hpp"
#include "natpatch/patch.hpp"
#include "natpatch/rng.hpp"

namespace natpatch {

/// DCGAN-style architecture: a 4x4 seed from a stride-1 transposed
/// convolution followed by `upsample_blocks` stride-2 transposed convolutions,
/// so the output side is 4 * 2^upsample_blocks (64 for the standard four
/// blocks).  The discriminator mirrors it with strided convolutions.
struct GeneratorArch {
    std::size_t latent_dim = 100;
    std::size_t base_channels = 64;
    std::size_t upsample_blocks = 4;
    bool batch_norm = true;
    /// Conditional when non-zero: a one-hot class code is appended to z
    /// (generator) and to the image channels (discriminator).
    std::size_t num_classes = 0;

    std::size_t output_size() const { return std::size_t{4} << upsample_blocks; }
    bool conditional() const { return num_classes > 0; }
    void validate() const;

    nlohmann::json to_json() const;
    static GeneratorArch from_json(const nlohmann::json& j);
    bool operator==(const GeneratorArch&) const = default;
};

/// Generator input.  class_id is -1 for unconditional generators.
struct LatentVector {
    Tensor z;
    int class_id = -1;
};

LatentVector sample_latent(const GeneratorArch& arch, Rng& rng, int class_id = -1);

nn::Sequential build_generator(const GeneratorArch& arch);
nn::Sequential build_discriminator(const GeneratorArch& arch);
/// N(0, 0.02) convolution weights, N(1, 0.02) batch-norm scales.
void init_dcgan_weights(nn::Sequential& net, Rng& rng);

/// Trace of one generate() call, needed to backpropagate to z.
struct GeneratorTrace {
    Patch patch;
    nn::Tape tape;
    std::size_t batch = 1;
};

/// A generator network together with its freeze contract.  When `trainable`
/// is false no operation on the handle can change its parameters.
class GeneratorHandle {
public:
    GeneratorHandle(GeneratorArch arch, nn::Sequential net, bool trainable);
    static GeneratorHandle create(const GeneratorArch& arch, Rng& rng, bool trainable);

    const GeneratorArch& arch() const { return arch_; }
    std::size_t resolution() const { return arch_.output_size(); }
    bool trainable() const { return trainable_; }
    void freeze() { trainable_ = false; }

    /// Native-resolution patch in [0, 1] (inference-mode batch norm).
    Patch generate(const LatentVector& z) const;
    GeneratorTrace generate_traced(const LatentVector& z) const;
    /// d loss / d z given d loss / d patch.  Parameter gradients are
    /// accumulated into `param_grads` when non-null (trainable handles only).
    Tensor backward(const GeneratorTrace& trace, const Tensor& grad_patch, std::vector<Tensor>* param_grads) const;

    /// Batched training-mode forward used by GAN updates; returns tanh-range
    /// images (N, 3, S, S).  Throws if the handle is frozen.
    Tensor forward_train(const std::vector<LatentVector>& zs, nn::Tape& tape, bool update_stats = true);
    /// Gradient of a tanh-range batch into parameter gradients; returns d/d input.
    Tensor backward_train(const Tensor& grad_out, const nn::Tape& tape, std::vector<Tensor>* param_grads) const;

    const nn::Sequential& network() const { return net_; }
    /// Mutable access; throws std::logic_error when frozen.
    nn::Sequential& mutable_network();
    std::uint64_t digest() const { return net_.digest(); }

private:
    Tensor input_batch(const std::vector<LatentVector>& zs) const;

    GeneratorArch arch_;
    nn::Sequential net_;
    bool trainable_;
};

class Discriminator {
public:
    Discriminator(GeneratorArch arch, nn::Sequential net);
    static Discriminator create(const GeneratorArch& arch, Rng& rng);

    /// images: (N, 3, S, S) in tanh range; returns logits (N).
    Tensor forward_train(const Tensor& images, const std::vector<int>& classes, nn::Tape& tape,
                         bool update_stats = true);
    /// Gradient w.r.t. the images (class channels dropped).
    Tensor backward(const Tensor& grad_logits, const nn::Tape& tape, std::vector<Tensor>* param_grads) const;

    const GeneratorArch& arch() const { return arch_; }
    nn::Sequential& network() { return net_; }
    const nn::Sequential& network() const { return net_; }
    std::uint64_t digest() const { return net_.digest(); }

private:
    GeneratorArch arch_;
    nn::Sequential net_;
};

struct GanLosses {
    double d_loss = 0.0;
    double g_loss = 0.0;
};

struct GanTrainState {
    GeneratorHandle generator;
    Discriminator discriminator;
    nn::Adam g_opt;
    nn::Adam d_opt;
    std::size_t epoch = 0;
    std::size_t steps = 0;
    std::vector<GanLosses> history;

    static GanTrainState create(const GeneratorArch& arch, nn::AdamOptions options, std::uint64_t seed);
};

/// Non-saturating BCE objective: one discriminator update on real vs. fake,
/// then one generator update against the updated discriminator.  The fake
/// batch comes from fresh z drawn from `rng`.  `real` is (N, 3, S, S) in
/// [0, 1]; `classes` is required for conditional architectures.
GanLosses gan_train_step(GanTrainState& state, const Tensor& real, Rng& rng,
                         const std::vector<int>& classes = {});

/// The two halves of gan_train_step, for schedules that interleave other
/// updates between them.  The discriminator half draws the fake batch and
/// updates D; the generator half updates G on that same batch against the
/// updated D, optionally adding `extra_grads` (aligned with the generator
/// parameters) before the optimizer step.
struct GanDiscriminatorStep {
    std::vector<LatentVector> zs;
    std::vector<int> fake_classes;
    nn::Tape g_tape;
    Tensor fake;
    double d_loss = 0.0;
};
GanDiscriminatorStep gan_discriminator_update(GanTrainState& state, const Tensor& real, Rng& rng,
                                              const std::vector<int>& classes = {});
double gan_generator_update(GanTrainState& state, const GanDiscriminatorStep& step,
                            const std::vector<Tensor>* extra_grads = nullptr);
/// Appends to the history; throws std::runtime_error on non-finite losses.
void record_gan_losses(GanTrainState& state, const GanLosses& losses);

/// Generator-only BCE loss of the discriminator on a [0, 1] patch, with the
/// gradient with respect to that patch.  The discriminator is not modified.
struct PatchRealism {
    double loss = 0.0;
    Tensor grad_patch;
};
PatchRealism patch_realism_loss(Discriminator& discriminator, const Patch& patch, int class_id);

// Checkpoints -------------------------------------------------------------

void save_generator(const std::filesystem::path& path, const GeneratorHandle& handle);

struct PretrainedSpec {
    std::filesystem::path weights;
    /// Architecture the caller expects; checked against the file when set.
    std::optional<GeneratorArch> expected_arch;
};

/// Loads a frozen generator.  Fails with a message naming the path on a
/// missing file, digest mismatch, or parameter shape mismatch.
GeneratorHandle load_pretrained(const PretrainedSpec& spec);

void save_gan_state(const std::filesystem::path& path, const GanTrainState& state);
GanTrainState load_gan_state(const std::filesystem::path& path);

/// Tile generated samples into a grid image (3, rows*S, cols*S).
Tensor sample_grid(const GeneratorHandle& handle, const std::vector<LatentVector>& zs, std::size_t columns);

}  // namespace natpatch
