#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "natpatch/tensor.hpp"

namespace natpatch {

/// Axis-aligned box in pixel coordinates, (x1, y1) top-left.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
    double center_x() const { return 0.5 * (x1 + x2); }
    double center_y() const { return 0.5 * (y1 + y2); }
    bool valid() const { return x1 < x2 && y1 < y2; }

    bool operator==(const Box&) const = default;
};

/// Intersection over union; 0 when either box is degenerate.
double iou(const Box& a, const Box& b);

struct Detection {
    Box box;
    int class_id = 0;
    double objectness = 0.0;
    double class_prob = 0.0;

    double confidence() const { return objectness * class_prob; }
};

struct GroundTruthLabel {
    Box box;
    int class_id = 0;
};

/// Every pre-threshold prediction of a detector, in some coordinate frame.
struct Candidate {
    Box box;
    double objectness = 0.0;
    std::vector<double> class_probs;
};

/// Per-class greedy non-maximum suppression, highest confidence first.
std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold);

/// Letterbox geometry: resize preserving aspect ratio, pad to a square with gray.
struct Letterbox {
    std::size_t source_height = 0, source_width = 0;
    std::size_t size = 0;
    std::size_t resized_height = 0, resized_width = 0;
    std::size_t pad_top = 0, pad_left = 0;

    static Letterbox fit(std::size_t height, std::size_t width, std::size_t size);

    double scale_x() const { return static_cast<double>(resized_width) / static_cast<double>(source_width); }
    double scale_y() const { return static_cast<double>(resized_height) / static_cast<double>(source_height); }
    Box to_network(const Box& b) const;
    Box to_source(const Box& b) const;
    bool identity() const { return resized_height == size && resized_width == size && size == source_height &&
                                   size == source_width; }
};

inline constexpr double kLetterboxFill = 0.5;

Tensor letterbox_image(const Tensor& image, const Letterbox& lb);
/// Gradient with respect to the source image.
Tensor letterbox_backward(const Tensor& grad_network, const Letterbox& lb);

class UnsupportedOperation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Output of a loss evaluation at network resolution.
struct NetworkLoss {
    double loss = 0.0;
    Tensor gradient;  ///< d loss / d network input; empty if not requested.
    std::vector<Candidate> candidates;
};

/// Output of a loss evaluation mapped back to the source image.
struct LossEvaluation {
    double loss = 0.0;
    Tensor gradient;  ///< d loss / d source image; empty if not requested.
    std::vector<Candidate> candidates;  ///< in source-image coordinates.
};

/// Uniform interface over object detectors.  Implementations provide the
/// network-resolution forward pass and the empty-label (object vanishing)
/// loss; letterboxing, thresholding, NMS and coordinate mapping live here so
/// detect() and the loss always see the same preprocessing.
class DetectorAdapter {
public:
    virtual ~DetectorAdapter() = default;

    virtual std::string name() const = 0;
    virtual std::size_t input_size() const = 0;
    virtual const std::vector<std::string>& class_names() const = 0;
    virtual bool supports_gradient() const { return true; }

    double confidence_threshold() const { return confidence_threshold_; }
    double nms_threshold() const { return nms_threshold_; }
    void set_thresholds(double confidence, double nms);

    /// Raw candidates for a (3, S, S) network input, in network coordinates.
    virtual std::vector<Candidate> infer(const Tensor& network_input) const = 0;
    /// Empty-label loss at network resolution.
    virtual NetworkLoss network_vanish_loss(const Tensor& network_input, bool want_gradient) const = 0;

    std::vector<Detection> detect(const Tensor& image) const;
    double vanish_loss(const Tensor& image, const std::vector<GroundTruthLabel>& labels = {}) const;
    Tensor image_gradient(const Tensor& image, const std::vector<GroundTruthLabel>& labels = {}) const;
    /// Loss, gradient and candidates from a single forward pass.
    LossEvaluation evaluate(const Tensor& image, bool want_gradient) const;

    /// Threshold + NMS over candidates (any frame).
    std::vector<Detection> postprocess(const std::vector<Candidate>& candidates) const;

protected:
    double confidence_threshold_ = 0.5;
    double nms_threshold_ = 0.45;
};

/// COCO results entries: image_id, category_id, bbox [x, y, w, h], score.
nlohmann::json to_coco_results(const std::vector<std::pair<long long, std::vector<Detection>>>& per_image,
                               const std::vector<long long>& category_ids);

std::vector<std::string> read_class_names(const std::filesystem::path& path);

}  // namespace natpatch
