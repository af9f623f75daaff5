#include "natpatch/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "natpatch/patch.hpp"

namespace natpatch {

double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::vector<Detection> non_max_suppression(std::vector<Detection> detections, double iou_threshold) {
    std::stable_sort(detections.begin(), detections.end(), [](const Detection& a, const Detection& b) {
        return a.confidence() > b.confidence();
    });
    std::vector<Detection> kept;
    for (const Detection& d : detections) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
            return k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold;
        });
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

Letterbox Letterbox::fit(std::size_t height, std::size_t width, std::size_t size) {
    if (height == 0 || width == 0 || size == 0) {
        throw std::invalid_argument("letterbox: malformed image dimensions " + std::to_string(height) + "x" +
                                    std::to_string(width));
    }
    Letterbox lb;
    lb.source_height = height;
    lb.source_width = width;
    lb.size = size;
    const double scale = std::min(static_cast<double>(size) / static_cast<double>(width),
                                  static_cast<double>(size) / static_cast<double>(height));
    lb.resized_width = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(width * scale)), 1, size);
    lb.resized_height = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(height * scale)), 1, size);
    lb.pad_left = (size - lb.resized_width) / 2;
    lb.pad_top = (size - lb.resized_height) / 2;
    return lb;
}

Box Letterbox::to_network(const Box& b) const {
    return Box{b.x1 * scale_x() + static_cast<double>(pad_left), b.y1 * scale_y() + static_cast<double>(pad_top),
               b.x2 * scale_x() + static_cast<double>(pad_left), b.y2 * scale_y() + static_cast<double>(pad_top)};
}

Box Letterbox::to_source(const Box& b) const {
    return Box{(b.x1 - static_cast<double>(pad_left)) / scale_x(), (b.y1 - static_cast<double>(pad_top)) / scale_y(),
               (b.x2 - static_cast<double>(pad_left)) / scale_x(), (b.y2 - static_cast<double>(pad_top)) / scale_y()};
}

Tensor letterbox_image(const Tensor& image, const Letterbox& lb) {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != lb.source_height ||
        image.dim(2) != lb.source_width) {
        throw std::invalid_argument("letterbox: image " + shape_string(image.shape()) +
                                    " does not match letterbox geometry");
    }
    if (lb.identity()) return image;
    const Tensor resized = resize_bilinear(image, lb.resized_height, lb.resized_width);
    Tensor out({3, lb.size, lb.size}, kLetterboxFill);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < lb.resized_height; ++i) {
            for (std::size_t j = 0; j < lb.resized_width; ++j) {
                out.at(c, lb.pad_top + i, lb.pad_left + j) = resized.at(c, i, j);
            }
        }
    }
    return out;
}

Tensor letterbox_backward(const Tensor& grad_network, const Letterbox& lb) {
    if (lb.identity()) return grad_network;
    Tensor region({3, lb.resized_height, lb.resized_width});
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < lb.resized_height; ++i) {
            for (std::size_t j = 0; j < lb.resized_width; ++j) {
                region.at(c, i, j) = grad_network.at(c, lb.pad_top + i, lb.pad_left + j);
            }
        }
    }
    return resize_bilinear_backward(region, lb.source_height, lb.source_width);
}

void DetectorAdapter::set_thresholds(double confidence, double nms) {
    if (!(confidence >= 0.0 && confidence <= 1.0) || !(nms > 0.0 && nms <= 1.0)) {
        throw std::invalid_argument("detector thresholds out of range");
    }
    confidence_threshold_ = confidence;
    nms_threshold_ = nms;
}

std::vector<Detection> DetectorAdapter::postprocess(const std::vector<Candidate>& candidates) const {
    std::vector<Detection> above;
    for (const Candidate& c : candidates) {
        if (c.class_probs.empty()) continue;
        const auto best = std::max_element(c.class_probs.begin(), c.class_probs.end());
        Detection d{c.box, static_cast<int>(best - c.class_probs.begin()), c.objectness, *best};
        if (d.confidence() > confidence_threshold_ && d.box.valid()) above.push_back(d);
    }
    return non_max_suppression(std::move(above), nms_threshold_);
}

std::vector<Detection> DetectorAdapter::detect(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument("detect: malformed image dimensions " + shape_string(image.shape()));
    }
    const Letterbox lb = Letterbox::fit(image.dim(1), image.dim(2), input_size());
    std::vector<Candidate> candidates = infer(letterbox_image(image, lb));
    for (Candidate& c : candidates) c.box = lb.to_source(c.box);
    return postprocess(candidates);
}

LossEvaluation DetectorAdapter::evaluate(const Tensor& image, bool want_gradient) const {
    if (want_gradient && !supports_gradient()) {
        throw UnsupportedOperation("detector '" + name() + "' does not provide gradients");
    }
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument("malformed image dimensions " + shape_string(image.shape()));
    }
    const Letterbox lb = Letterbox::fit(image.dim(1), image.dim(2), input_size());
    NetworkLoss net = network_vanish_loss(letterbox_image(image, lb), want_gradient);
    LossEvaluation out;
    out.loss = net.loss;
    if (want_gradient) out.gradient = letterbox_backward(net.gradient, lb);
    out.candidates = std::move(net.candidates);
    for (Candidate& c : out.candidates) c.box = lb.to_source(c.box);
    return out;
}

double DetectorAdapter::vanish_loss(const Tensor& image, const std::vector<GroundTruthLabel>& labels) const {
    if (!labels.empty()) {
        throw std::invalid_argument("vanish_loss is defined for the empty label set only");
    }
    if (!supports_gradient()) {
        throw UnsupportedOperation("detector '" + name() + "' does not provide a differentiable loss");
    }
    return evaluate(image, false).loss;
}

Tensor DetectorAdapter::image_gradient(const Tensor& image, const std::vector<GroundTruthLabel>& labels) const {
    if (!labels.empty()) {
        throw std::invalid_argument("image_gradient is defined for the empty label set only");
    }
    return evaluate(image, true).gradient;
}

nlohmann::json to_coco_results(const std::vector<std::pair<long long, std::vector<Detection>>>& per_image,
                               const std::vector<long long>& category_ids) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& [image_id, dets] : per_image) {
        for (const Detection& d : dets) {
            const auto cls = static_cast<std::size_t>(d.class_id);
            out.push_back({{"image_id", image_id},
                           {"category_id", cls < category_ids.size() ? category_ids[cls] : d.class_id},
                           {"bbox", {d.box.x1, d.box.y1, d.box.width(), d.box.height()}},
                           {"score", d.confidence()}});
        }
    }
    return out;
}

std::vector<std::string> read_class_names(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read class names file " + path.string());
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) names.push_back(line);
    }
    return names;
}

}  // namespace natpatch
