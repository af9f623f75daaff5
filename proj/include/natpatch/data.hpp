#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "natpatch/detector.hpp"
#include "natpatch/rng.hpp"
#include "natpatch/tensor.hpp"

namespace natpatch {

struct ImageRecord {
    long long id = 0;
    std::string file_name;
    std::size_t width = 0;
    std::size_t height = 0;
    /// Provenance of the image ("train", "val", ...); drives split_dataset.
    std::string split;
};

struct Annotation {
    long long id = 0;
    long long image_id = 0;
    long long category_id = 0;
    Box bbox;
};

struct Category {
    long long id = 0;
    std::string name;
};

/// COCO-style detection dataset.
struct DetectionDataset {
    std::vector<ImageRecord> images;
    std::vector<Annotation> annotations;
    std::vector<Category> categories;
    std::filesystem::path image_root;

    /// Throws std::invalid_argument on dangling annotations, duplicate ids or
    /// boxes outside their image.
    void validate() const;

    std::vector<const Annotation*> annotations_for(long long image_id) const;
    /// Position of a category id in `categories`, which is the class index
    /// used by detectors and the evaluator.
    int class_index(long long category_id) const;
    std::vector<std::string> class_names() const;
    std::vector<long long> category_ids() const;
};

/// Read a COCO instances file.  Every image is tagged with `split` unless the
/// file carries a per-image "split" field (as files written by to_coco_json do).
DetectionDataset load_coco(const std::filesystem::path& annotations, const std::filesystem::path& image_root,
                           const std::string& split = "");
nlohmann::json to_coco_json(const DetectionDataset& dataset);
void write_coco(const std::filesystem::path& path, const DetectionDataset& dataset);

/// Union of datasets with identical category lists (e.g. COCO train + val).
DetectionDataset merge_datasets(const std::vector<DetectionDataset>& parts);

struct FilterCounts {
    std::size_t images_before = 0, images_after = 0;
    std::size_t annotations_before = 0, annotations_after = 0;
};

/// Keep images with at least one annotation in `classes` and only those
/// annotations.  Unknown class names are rejected.
DetectionDataset filter_by_classes(const DetectionDataset& dataset, const std::set<std::string>& classes,
                                   FilterCounts* counts = nullptr);

enum class SplitProtocol { inherit };

/// Partition by inherited provenance: images tagged "train" go to the train
/// side, "val"/"test" to the test side.  Images without provenance are an error.
std::pair<DetectionDataset, DetectionDataset> split_dataset(const DetectionDataset& dataset,
                                                            SplitProtocol protocol = SplitProtocol::inherit);

nlohmann::json dataset_summary(const DetectionDataset& dataset);

/// Directory-of-images corpus after exclusion-list cleaning.
struct ImageCorpus {
    std::filesystem::path root;
    std::vector<std::filesystem::path> paths;  ///< lexicographic
    std::size_t excluded = 0;
    std::size_t unreadable = 0;
    std::vector<std::string> warnings;

    std::size_t size() const { return paths.size(); }
};

/// Exclusion list: one path per line relative to `root`, '#' starts a comment.
ImageCorpus load_corpus(const std::filesystem::path& root, const std::filesystem::path& exclusion_list = {});
std::set<std::string> read_exclusion_list(const std::filesystem::path& path);

struct SyntheticSpec {
    std::size_t images = 10;
    std::size_t shapes_per_image = 3;
    std::size_t height = 64;
    std::size_t width = 64;
    std::vector<std::string> classes{"red", "green", "blue"};
    std::size_t min_shape = 8;   ///< side length bounds in pixels
    std::size_t max_shape = 20;
    std::string split = "train";

    void validate() const;
};

struct SyntheticDataset {
    DetectionDataset dataset;
    std::vector<Tensor> images;  ///< aligned with dataset.images
};

/// Coloured rectangles and ellipses on a dark textured background, class
/// given by colour, with exact ground-truth boxes.  Deterministic in `rng`.
SyntheticDataset make_synthetic_dataset(const SyntheticSpec& spec, Rng& rng);
/// Writes images/<id>.png and annotations.json under `dir`.
void write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticDataset& data);

/// Two-mode "flower" corpus: yellow-centred white blossoms or red blossoms on
/// green, used for desk-scale GAN training.  Returns (N, 3, size, size) items.
std::vector<Tensor> make_flower_corpus(std::size_t count, std::size_t size, Rng& rng, std::vector<int>* modes = nullptr);

/// Image plus ground truth in detector-input coordinates.
struct PreparedSample {
    long long image_id = 0;
    Tensor image;
    std::vector<GroundTruthLabel> labels;
};

/// Letterbox each image to `size` x `size` and map its boxes accordingly.
/// Images are read from `dataset.image_root` unless `preloaded` is given.
std::vector<PreparedSample> prepare_samples(const DetectionDataset& dataset, std::size_t size,
                                            const std::vector<Tensor>* preloaded = nullptr);

/// Sample a (batch, 3, size, size) tensor from a list of images, resizing each.
Tensor sample_batch(const std::vector<Tensor>& images, std::size_t batch, std::size_t size, Rng& rng);

}  // namespace natpatch
