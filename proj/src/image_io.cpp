#include "natpatch/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>

namespace natpatch {

Tensor from_mat(const cv::Mat& bgr8) {
    if (bgr8.empty() || bgr8.type() != CV_8UC3) {
        throw std::invalid_argument("from_mat expects a non-empty 8-bit BGR image");
    }
    const auto h = static_cast<std::size_t>(bgr8.rows);
    const auto w = static_cast<std::size_t>(bgr8.cols);
    Tensor out({3, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        const auto* row = bgr8.ptr<cv::Vec3b>(static_cast<int>(y));
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) out.at(c, y, x) = row[x][2 - c] / 255.0;
        }
    }
    return out;
}

cv::Mat to_mat(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument("to_mat expects a (3, H, W) tensor, got " + shape_string(image.shape()));
    }
    const int h = static_cast<int>(image.dim(1));
    const int w = static_cast<int>(image.dim(2));
    cv::Mat out(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y) {
        auto* row = out.ptr<cv::Vec3b>(y);
        for (int x = 0; x < w; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(image.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x)), 0.0, 1.0);
                row[x][static_cast<int>(2 - c)] = static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
    }
    return out;
}

Tensor load_image(const std::filesystem::path& path) {
    const cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (m.empty()) throw std::runtime_error("cannot decode image " + path.string());
    return from_mat(m);
}

void save_png(const std::filesystem::path& path, const Tensor& image) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), to_mat(image))) {
        throw std::runtime_error("cannot write image " + path.string());
    }
}

Tensor quantize8(const Tensor& image) {
    Tensor out(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) {
        out[i] = static_cast<double>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0)) / 255.0;
    }
    return out;
}

}  // namespace natpatch
