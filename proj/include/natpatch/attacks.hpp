#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "natpatch/detector.hpp"
#include "natpatch/generators.hpp"
#include "natpatch/patch.hpp"
#include "natpatch/rng.hpp"

namespace natpatch {

enum class AttackMode { per_instance, universal };
enum class PatchSource { pixel, frozen_generator, trained_generator };
enum class CombinedVariant { v1, v2, v3 };

std::string to_string(AttackMode m);
std::string to_string(PatchSource s);
std::string to_string(CombinedVariant v);

struct AttackConfig {
    AttackMode mode = AttackMode::universal;
    PatchSource source = PatchSource::pixel;
    double patch_lr = 0.01;
    std::size_t epochs = 1000;
    double tv_weight = 0.01;
    bool transform = false;
    TransformConfig transform_config;
    bool latent_shift = false;
    double latent_shift_alpha = 0.5;
    Placement placement{0, 0, 100, 100};
    std::uint64_t seed = 0;
    double gan_lr = 2e-4;
    CombinedVariant variant = CombinedVariant::v2;
    /// Weights of the realism and detector terms in V2's second generator update.
    double v2_gan_weight = 1.0;
    double v2_detector_weight = 1.0;
    /// Class code for conditional generators (-1: unconditional).
    int patch_class = -1;
    std::size_t gan_batch = 64;
    std::size_t checkpoint_every = 500;
    double proximity_radius = 150.0;

    /// Throws std::invalid_argument listing every violated constraint.
    void validate() const;
    nlohmann::json to_json() const;
    /// Missing keys keep their defaults; unknown keys are rejected.
    static AttackConfig from_json(const nlohmann::json& j);
};

/// Averages over the optimization steps of one epoch.
struct EpochRecord {
    std::size_t epoch = 0;
    double detector_loss = 0.0;
    double tv_loss = 0.0;  ///< unweighted total variation
    double total_loss = 0.0;  ///< detector_loss + tv_weight * tv_loss
    double g_loss = 0.0;
    double d_loss = 0.0;
    double mean_objectness_near = 0.0;
    double detections = 0.0;  ///< mean detections per image after thresholding
};

/// Detector response to a fixed patch over an image set.
struct PatchSummary {
    double detector_loss = 0.0;
    double mean_objectness_near = 0.0;
    double detections = 0.0;
};

struct AttackResult {
    /// Patch as composited: generator output (or pixels) with latent shift applied if enabled.
    Patch patch;
    std::optional<LatentVector> latent;
    std::vector<EpochRecord> trajectory;
    std::vector<std::size_t> checkpoint_epochs;
    PatchSummary baseline;  ///< initial patch
    PatchSummary final_summary;
    /// False when the run stopped early (RunOptions::stop_after).
    bool completed = true;
};

struct RunOptions {
    /// Run directory; nothing is written when empty.
    std::filesystem::path dir;
    /// Continue from `dir`/state.nparc when present.
    bool resume = false;
    /// Stop after this epoch without a final checkpoint (0 = run to the end).
    std::size_t stop_after = 0;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Flower corpus for combined training, (3, S, S) images at the generator
/// resolution; labels required for conditional generators.
struct GanCorpus {
    std::vector<Tensor> images;
    std::vector<int> labels;
};

/// Draws `batch` corpus images (resized to `size` if needed) with the labels
/// of the drawn images when `labels` is non-null.
Tensor sample_corpus_batch(const GanCorpus& corpus, std::size_t batch, std::size_t size, Rng& rng,
                           std::vector<int>* labels = nullptr);

/// Pixel-space patch optimized by signed gradient descent with [0, 1] clamping.
AttackResult pgd_patch_attack(const DetectorAdapter& detector, const std::vector<Tensor>& images,
                              const AttackConfig& config, const RunOptions& run = {});

/// Latent-space attack through a frozen generator (raw gradient descent on z).
AttackResult pretrained_gan_attack(const DetectorAdapter& detector, const GeneratorHandle& generator,
                                   const std::vector<Tensor>& images, const AttackConfig& config,
                                   const RunOptions& run = {});

/// Joint GAN training and patch-noise optimization under one of three schedules.
AttackResult combined_patch_gan_attack(const DetectorAdapter& detector, GanTrainState& gan, const GanCorpus& flowers,
                                       const std::vector<Tensor>& images, const AttackConfig& config,
                                       const RunOptions& run = {});

using AttackOp = std::function<AttackResult(const std::vector<Tensor>&, const AttackConfig&)>;
/// Runs `op` in universal mode over the whole dataset.
AttackResult universal_train(const AttackOp& op, const std::vector<Tensor>& dataset, AttackConfig config);

/// Detector loss, objectness near the patch and detection count with `patch`
/// composited (or the clean images when `patch` is empty), averaged over images.
PatchSummary summarize_patch(const DetectorAdapter& detector, const std::vector<Tensor>& images,
                             const std::optional<Patch>& patch, const Placement& placement, double radius);

/// "epoch,detector_loss,tv_loss,g_loss,d_loss,total_loss,mean_objectness_near,detections"
std::string metrics_header();
std::string metrics_row(const EpochRecord& r);

}  // namespace natpatch
