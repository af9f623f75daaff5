#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "natpatch/detector.hpp"
#include "natpatch/nn.hpp"

namespace natpatch {

struct MockDetectorConfig {
    std::size_t input_size = 64;
    std::size_t grid = 8;      ///< cells per side
    std::size_t hidden = 4;    ///< channels of the two feature layers
    double anchor = 0.0;       ///< box side for tw = th = 0; 0 means one cell
    std::vector<std::string> classes{"red", "green", "blue"};

    std::size_t cell_size() const { return input_size / grid; }
    std::size_t head_channels() const { return 5 + classes.size(); }
    void validate() const;
};

/// Three-layer convolutional grid predictor for desk-scale experiments.
///
/// conv3x3 -> tanh -> conv3x3 -> tanh -> head conv with kernel = stride = cell
/// size, giving one prediction per grid cell with channels
/// [tx, ty, tw, th, objectness logit, class logits...].  Objectness and box
/// offsets use sigmoids, class probabilities a softmax.  The vanishing loss is
/// the sum of squared objectness over all cells.
class MockDetector final : public DetectorAdapter {
public:
    explicit MockDetector(MockDetectorConfig config = {});

    /// Weights drawn from N(0, stddev).
    static MockDetector random(MockDetectorConfig config, std::uint64_t seed, double stddev = 0.3);
    /// Hand-set weights that fire on bright, saturated regions and classify
    /// them by dominant colour channel.
    static MockDetector shape_detector(MockDetectorConfig config = {});

    std::string name() const override { return "mock"; }
    std::size_t input_size() const override { return config_.input_size; }
    const std::vector<std::string>& class_names() const override { return config_.classes; }

    std::vector<Candidate> infer(const Tensor& network_input) const override;
    NetworkLoss network_vanish_loss(const Tensor& network_input, bool want_gradient) const override;

    /// sum_cells weight[i, j] * objectness[i, j]^2; weights are (grid, grid).
    NetworkLoss weighted_loss(const Tensor& network_input, const Tensor& cell_weights, bool want_gradient) const;
    /// (grid, grid) objectness map.
    Tensor objectness_map(const Tensor& network_input) const;

    const MockDetectorConfig& config() const { return config_; }
    nn::Sequential& network() { return net_; }
    const nn::Sequential& network() const { return net_; }

    void save(const std::filesystem::path& path) const;
    static MockDetector load(const std::filesystem::path& path);

private:
    Tensor head(const Tensor& network_input, nn::Tape& tape) const;
    std::vector<Candidate> decode(const Tensor& head_out) const;

    MockDetectorConfig config_;
    nn::Sequential net_;
};

}  // namespace natpatch
