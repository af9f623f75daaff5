#pragma once

#include <cstddef>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "natpatch/rng.hpp"
#include "natpatch/tensor.hpp"

namespace natpatch {

/// RGB pixel grid (3, H, W) with every value in [0, 1].
struct Patch {
    Tensor pixels;

    Patch() = default;
    explicit Patch(Tensor values);
    static Patch filled(std::size_t height, std::size_t width, double value);
    static Patch uniform(std::size_t height, std::size_t width, Rng& rng);

    std::size_t height() const { return pixels.dim(1); }
    std::size_t width() const { return pixels.dim(2); }
    /// Clamp every channel value into [0, 1].
    void project();
};

/// Where a patch is drawn: top-left anchor and render size, in image pixels.
struct Placement {
    std::size_t x = 0;
    std::size_t y = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    double center_x() const { return static_cast<double>(x) + static_cast<double>(width) / 2.0; }
    double center_y() const { return static_cast<double>(y) + static_cast<double>(height) / 2.0; }
};

/// Throws std::invalid_argument if the rectangle leaves the image.
void validate_placement(const Placement& placement, std::size_t image_height, std::size_t image_width);

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

struct TransformConfig {
    Range contrast{0.8, 1.2};
    Range brightness{-0.1, 0.1};
    Range noise{-0.1, 0.1};

    void validate() const;
};

/// One draw of the robustness transformation: scalar contrast and brightness,
/// per-pixel additive noise.
struct TransformSample {
    double contrast = 1.0;
    double brightness = 0.0;
    Tensor noise;
};

TransformSample sample_transform(const TransformConfig& config, std::size_t height, std::size_t width,
                                 Rng& rng);
Patch apply_transform(const Patch& patch, const TransformSample& sample);
/// Gradient through clamp(c * p + b + n): c where the pre-clamp value lies in [0, 1], else 0.
Tensor apply_transform_backward(const Patch& patch, const TransformSample& sample, const Tensor& grad_out);
Patch transform_patch(const Patch& patch, const TransformConfig& config, Rng& rng);

/// (1 - alpha) * value + alpha * mask.  The Patch overload reprojects to [0, 1].
Patch latent_shift(const Patch& value, const Patch& mask, double alpha);
Tensor latent_shift(const Tensor& value, const Tensor& mask, double alpha);
Tensor latent_shift_backward(const Patch& value, const Patch& mask, double alpha, const Tensor& grad_out);

/// Anisotropic total variation: sum over channels of vertical and horizontal
/// absolute neighbour differences.
double total_variation(const Patch& patch);
Tensor total_variation_gradient(const Patch& patch);

// Bilinear resampling with half-pixel centres (align_corners = false).
Tensor resize_bilinear(const Tensor& image, std::size_t out_height, std::size_t out_width);
/// Adjoint of resize_bilinear.
Tensor resize_bilinear_backward(const Tensor& grad_out, std::size_t in_height, std::size_t in_width);

/// Composite a patch (resized to the placement size if needed) onto an image.
Tensor apply_patch(const Tensor& image, const Patch& patch, const Placement& placement);
/// Gradient with respect to the patch pixels given the gradient of the composited image.
Tensor apply_patch_backward(const Tensor& grad_image, const Patch& patch, const Placement& placement);

struct PatchMetadata {
    std::size_t native_height = 0;
    std::size_t native_width = 0;
    std::string config_hash;
    std::uint64_t seed = 0;
    nlohmann::json extra = nlohmann::json::object();
};

/// Writes `<stem>.png` (8-bit RGB) and `<stem>.json`.
void save_patch(const std::filesystem::path& png_path, const Patch& patch, const PatchMetadata& meta);
Patch load_patch(const std::filesystem::path& png_path);
PatchMetadata load_patch_metadata(const std::filesystem::path& png_path);

nlohmann::json to_json(const Placement& p);
Placement placement_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TransformConfig& c);
TransformConfig transform_config_from_json(const nlohmann::json& j);

}  // namespace natpatch
