#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "natpatch/detector.hpp"
#include "natpatch/rng.hpp"

namespace natpatch {

/// One [section] of a darknet .cfg file.
struct CfgSection {
    std::string type;
    std::vector<std::pair<std::string, std::string>> options;

    bool has(const std::string& key) const;
    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    std::vector<int> get_ints(const std::string& key) const;
    std::vector<double> get_doubles(const std::string& key) const;
};

std::vector<CfgSection> parse_darknet_cfg(const std::string& text);

/// YOLOv3-family detector built from a darknet .cfg and .weights pair.
///
/// Supported sections: net, convolutional (batch_normalize, filters, size,
/// stride, pad, activation leaky|linear), shortcut, route, upsample, maxpool
/// and yolo.  Batch norm is folded into the convolutions on load.  Gradients
/// are available with respect to the input image only; the vanishing loss is
/// the no-object binary cross-entropy sum over every anchor of every yolo
/// layer, i.e. sum softplus(objectness logit).
class DarknetDetector final : public DetectorAdapter {
public:
    DarknetDetector(const std::string& cfg_text, std::vector<std::string> class_names);
    static DarknetDetector load(const std::filesystem::path& cfg, const std::filesystem::path& weights,
                                const std::filesystem::path& names);

    std::string name() const override { return "darknet"; }
    std::size_t input_size() const override { return input_size_; }
    const std::vector<std::string>& class_names() const override { return class_names_; }

    std::vector<Candidate> infer(const Tensor& network_input) const override;
    NetworkLoss network_vanish_loss(const Tensor& network_input, bool want_gradient) const override;

    void load_weights(const std::filesystem::path& path);
    void save_weights(const std::filesystem::path& path) const;
    /// Convolution weights from N(0, stddev); batch-norm statistics set to identity.
    void randomize(Rng& rng, double stddev);

    std::size_t layer_count() const { return layers_.size(); }
    /// Raw output of the last forward pass of every yolo layer, (A*(5+C), H, W).
    std::vector<Tensor> yolo_outputs(const Tensor& network_input) const;

private:
    enum class Kind { conv, shortcut, route, upsample, maxpool, yolo };
    struct LayerSpec {
        Kind kind = Kind::conv;
        // conv
        std::size_t filters = 0, size = 1, stride = 1, pad = 0;
        bool batch_norm = false;
        bool leaky = false;
        Tensor weight, bias, scales, mean, variance;
        Tensor folded_weight, folded_bias;
        // shortcut / route
        std::vector<std::size_t> sources;
        // maxpool
        std::size_t pool_pad = 0;
        // yolo
        std::vector<std::pair<double, double>> anchors;
        std::size_t classes = 0;
        // shape of the output
        std::size_t channels = 0, height = 0, width = 0;
    };

    void fold();
    std::vector<Tensor> forward_all(const Tensor& input) const;
    std::vector<Candidate> decode(const std::vector<Tensor>& outputs) const;

    std::vector<LayerSpec> layers_;
    std::vector<std::string> class_names_;
    std::size_t input_size_ = 416;
};

}  // namespace natpatch
