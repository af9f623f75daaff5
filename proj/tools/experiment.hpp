#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "natpatch/attacks.hpp"
#include "natpatch/data.hpp"
#include "natpatch/detector.hpp"
#include "natpatch/generators.hpp"

namespace natpatch::cli {

/// Every documented key with its default.  Config files and --set overrides
/// are merged into this tree; keys that do not appear here are rejected.
nlohmann::json default_config();

/// Recursively merge `overlay` into `base`.  Throws std::invalid_argument
/// naming the dotted path of any unknown key or of a type change.
void merge_config(nlohmann::json& base, const nlohmann::json& overlay, const std::string& prefix = "");

/// Apply one "dotted.key=value" override.  The value is parsed as JSON when
/// possible and taken as a plain string otherwise.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Defaults, then the optional file, then the overrides in order.
nlohmann::json resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

/// Cross-field checks run before any compute; lists every problem at once.
void validate_config(const nlohmann::json& config);

/// output_dir if set, otherwise $NATPATCH_OUTPUT_ROOT (default "runs") / name / command.
std::filesystem::path output_directory(const nlohmann::json& config, const std::string& command);

AttackConfig attack_config(const nlohmann::json& config);
GeneratorArch generator_arch(const nlohmann::json& config);

std::unique_ptr<DetectorAdapter> make_detector(const nlohmann::json& config);

/// Dataset and images for one split ("train" or "test").  Synthetic datasets
/// are generated in memory from dataset.seed; COCO manifests are read from
/// dataset.<split>_annotations relative to dataset.image_root.
struct LoadedDataset {
    DetectionDataset dataset;
    /// Letterboxed to the detector input size, with ground-truth class ids
    /// mapped onto the detector's class list by name.
    std::vector<PreparedSample> samples;
};
LoadedDataset load_split(const nlohmann::json& config, const std::string& split, const DetectorAdapter& detector);

/// Flower corpus or a directory of images, square-cropped and area-resized
/// to `size`.
GanCorpus load_gan_corpus(const nlohmann::json& config, std::size_t size, std::vector<std::string>* warnings);

/// Centre square crop followed by area-averaging resize.
Tensor crop_and_resize(const Tensor& image, std::size_t size);

/// "key=value" pairs joined by spaces, values formatted with %.6g.
std::string progress_line(const std::string& event, const std::vector<std::pair<std::string, double>>& fields);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

/// Run `fn(i)` for i in [0, n) on up to `threads` workers (0: hardware concurrency).
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace natpatch::cli
