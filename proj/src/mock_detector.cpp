#include "natpatch/mock_detector.hpp"

#include <algorithm>
#include <cmath>

#include "natpatch/archive.hpp"

namespace natpatch {

namespace {

constexpr std::size_t kObjChannel = 4;
constexpr std::size_t kClassOffset = 5;

}  // namespace

void MockDetectorConfig::validate() const {
    if (grid == 0 || input_size == 0 || input_size % grid != 0) {
        throw std::invalid_argument("mock detector input size must be a positive multiple of the grid");
    }
    if (hidden == 0) throw std::invalid_argument("mock detector needs at least one hidden channel");
    if (classes.empty()) throw std::invalid_argument("mock detector needs at least one class");
}

MockDetector::MockDetector(MockDetectorConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t cell = config_.cell_size();
    net_.add<nn::Conv2d>(3, config_.hidden, nn::ConvGeometry{3, 1, 1});
    net_.add<nn::ActivationLayer>(nn::Activation::tanh);
    net_.add<nn::Conv2d>(config_.hidden, config_.hidden, nn::ConvGeometry{3, 1, 1});
    net_.add<nn::ActivationLayer>(nn::Activation::tanh);
    net_.add<nn::Conv2d>(config_.hidden, config_.head_channels(), nn::ConvGeometry{cell, cell, 0});
}

MockDetector MockDetector::random(MockDetectorConfig config, std::uint64_t seed, double stddev) {
    MockDetector det(std::move(config));
    Rng rng(seed);
    for (Tensor* p : det.net_.parameters()) nn::init_normal(*p, rng, 0.0, stddev);
    return det;
}

MockDetector MockDetector::shape_detector(MockDetectorConfig config) {
    if (config.hidden < 4) config.hidden = 4;
    MockDetector det(std::move(config));
    const std::size_t k = det.config_.classes.size();
    const std::size_t cell = det.config_.cell_size();
    const double cell_area = static_cast<double>(cell * cell);

    // Layer 1: per-channel soft threshold at 0.55.
    auto& l1 = dynamic_cast<nn::Conv2d&>(det.net_.layer(0));
    for (std::size_t c = 0; c < 3; ++c) {
        l1.weight().at(c, c, 1, 1) = 8.0;
        l1.bias()[c] = -8.0 * 0.55;
    }
    // Layer 2: pass-through of the three colour responses plus an
    // "any channel bright" detector in channel 3.
    auto& l2 = dynamic_cast<nn::Conv2d&>(det.net_.layer(2));
    for (std::size_t c = 0; c < 3; ++c) {
        l2.weight().at(c, c, 1, 1) = 1.0;
        l2.weight().at(3, c, 1, 1) = 2.0;
    }
    l2.bias()[3] = 4.0;
    // Head: objectness from the mean "bright" response of the cell, class
    // logits from the mean colour responses.
    auto& head = dynamic_cast<nn::Conv2d&>(det.net_.layer(4));
    for (std::size_t y = 0; y < cell; ++y) {
        for (std::size_t x = 0; x < cell; ++x) {
            head.weight().at(kObjChannel, 3, y, x) = 4.2 / cell_area;
            for (std::size_t c = 0; c < std::min<std::size_t>(k, 3); ++c) {
                head.weight().at(kClassOffset + c, c, y, x) = 6.0 / cell_area;
            }
        }
    }
    return det;
}

Tensor MockDetector::head(const Tensor& network_input, nn::Tape& tape) const {
    const std::size_t s = config_.input_size;
    if (network_input.rank() != 3 || network_input.dim(0) != 3 || network_input.dim(1) != s ||
        network_input.dim(2) != s) {
        throw std::invalid_argument("mock detector expects a (3, " + std::to_string(s) + ", " + std::to_string(s) +
                                    ") input, got " + shape_string(network_input.shape()));
    }
    return net_.forward(network_input.reshaped({1, 3, s, s}), tape);
}

std::vector<Candidate> MockDetector::decode(const Tensor& out) const {
    const std::size_t g = config_.grid;
    const double cell = static_cast<double>(config_.cell_size());
    const double anchor = config_.anchor > 0 ? config_.anchor : cell;
    const std::size_t k = config_.classes.size();
    std::vector<Candidate> candidates;
    candidates.reserve(g * g);
    for (std::size_t i = 0; i < g; ++i) {
        for (std::size_t j = 0; j < g; ++j) {
            const double cx = (static_cast<double>(j) + nn::sigmoid(out.at(0, 0, i, j))) * cell;
            const double cy = (static_cast<double>(i) + nn::sigmoid(out.at(0, 1, i, j))) * cell;
            const double w = anchor * std::exp(out.at(0, 2, i, j));
            const double h = anchor * std::exp(out.at(0, 3, i, j));
            Candidate c;
            c.box = Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
            c.objectness = nn::sigmoid(out.at(0, kObjChannel, i, j));
            double mx = -1e300;
            for (std::size_t q = 0; q < k; ++q) mx = std::max(mx, out.at(0, kClassOffset + q, i, j));
            double z = 0.0;
            c.class_probs.resize(k);
            for (std::size_t q = 0; q < k; ++q) {
                c.class_probs[q] = std::exp(out.at(0, kClassOffset + q, i, j) - mx);
                z += c.class_probs[q];
            }
            for (double& p : c.class_probs) p /= z;
            candidates.push_back(std::move(c));
        }
    }
    return candidates;
}

std::vector<Candidate> MockDetector::infer(const Tensor& network_input) const {
    nn::Tape tape;
    return decode(head(network_input, tape));
}

Tensor MockDetector::objectness_map(const Tensor& network_input) const {
    nn::Tape tape;
    const Tensor out = head(network_input, tape);
    const std::size_t g = config_.grid;
    Tensor map({g, g});
    for (std::size_t i = 0; i < g; ++i) {
        for (std::size_t j = 0; j < g; ++j) map[i * g + j] = nn::sigmoid(out.at(0, kObjChannel, i, j));
    }
    return map;
}

NetworkLoss MockDetector::weighted_loss(const Tensor& network_input, const Tensor& cell_weights,
                                        bool want_gradient) const {
    const std::size_t g = config_.grid;
    if (cell_weights.size() != g * g) throw std::invalid_argument("cell weights must be grid x grid");
    nn::Tape tape;
    const Tensor out = head(network_input, tape);
    NetworkLoss result;
    Tensor grad_head(out.shape());
    for (std::size_t i = 0; i < g; ++i) {
        for (std::size_t j = 0; j < g; ++j) {
            const double s = nn::sigmoid(out.at(0, kObjChannel, i, j));
            const double wgt = cell_weights[i * g + j];
            result.loss += wgt * s * s;
            grad_head.at(0, kObjChannel, i, j) = wgt * 2.0 * s * s * (1.0 - s);
        }
    }
    result.candidates = decode(out);
    if (want_gradient) {
        const std::size_t sz = config_.input_size;
        result.gradient = net_.backward(grad_head, tape, nullptr).reshaped({3, sz, sz});
    }
    return result;
}

NetworkLoss MockDetector::network_vanish_loss(const Tensor& network_input, bool want_gradient) const {
    return weighted_loss(network_input, Tensor({config_.grid, config_.grid}, 1.0), want_gradient);
}

void MockDetector::save(const std::filesystem::path& path) const {
    Archive a;
    a.meta["kind"] = "mock_detector";
    a.meta["input_size"] = config_.input_size;
    a.meta["grid"] = config_.grid;
    a.meta["hidden"] = config_.hidden;
    a.meta["anchor"] = config_.anchor;
    a.meta["classes"] = config_.classes;
    a.meta["layers"] = net_.describe();
    const auto params = net_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) a.tensors["param." + std::to_string(i)] = *params[i];
    write_archive(path, a);
}

MockDetector MockDetector::load(const std::filesystem::path& path) {
    const Archive a = read_archive(path);
    if (a.meta.value("kind", "") != "mock_detector") {
        throw std::runtime_error("weights " + path.string() + " do not describe a mock detector");
    }
    MockDetectorConfig cfg;
    cfg.input_size = a.meta.at("input_size");
    cfg.grid = a.meta.at("grid");
    cfg.hidden = a.meta.at("hidden");
    cfg.anchor = a.meta.at("anchor");
    cfg.classes = a.meta.at("classes").get<std::vector<std::string>>();
    MockDetector det(cfg);
    auto params = det.net_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor& t = a.tensor("param." + std::to_string(i));
        if (t.shape() != params[i]->shape()) {
            throw std::runtime_error("weights " + path.string() + ": parameter " + std::to_string(i) + " has shape " +
                                     shape_string(t.shape()) + ", expected " + shape_string(params[i]->shape()));
        }
        *params[i] = t;
    }
    return det;
}

}  // namespace natpatch
