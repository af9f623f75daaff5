#pragma once

#include <filesystem>

#include "natpatch/tensor.hpp"

namespace cv {
class Mat;
}

namespace natpatch {

/// Decode any OpenCV-readable image to a (3, H, W) RGB tensor in [0, 1].
/// EXIF orientation is applied.  Throws std::runtime_error on failure.
Tensor load_image(const std::filesystem::path& path);

/// Encode a (3, H, W) tensor as 8-bit RGB; values are clamped and rounded.
void save_png(const std::filesystem::path& path, const Tensor& image);

Tensor from_mat(const cv::Mat& bgr8);
cv::Mat to_mat(const Tensor& image);

/// Round-trip quantisation used when a tensor is stored as 8-bit.
Tensor quantize8(const Tensor& image);

}  // namespace natpatch
