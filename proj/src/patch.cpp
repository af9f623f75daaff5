#include "natpatch/patch.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "natpatch/image_io.hpp"

namespace natpatch {

namespace {

void require_patch_shape(const Tensor& t) {
    if (t.rank() != 3 || t.dim(0) != 3 || t.dim(1) == 0 || t.dim(2) == 0) {
        throw std::invalid_argument("patch must be a non-empty (3, H, W) grid, got " + shape_string(t.shape()));
    }
}

void validate_range(const Range& r, const char* name) {
    if (!(r.lo <= r.hi)) {
        throw std::invalid_argument(std::string("transform ") + name + " range has lo > hi");
    }
}

double sign(double v) { return (v > 0) - (v < 0); }

/// Source sampling positions for one axis.
struct AxisTaps {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

AxisTaps axis_taps(std::size_t in, std::size_t out) {
    AxisTaps taps;
    taps.lo.resize(out);
    taps.hi.resize(out);
    taps.frac.resize(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
        src = std::max(src, 0.0);
        auto lo = static_cast<std::size_t>(std::floor(src));
        lo = std::min(lo, in - 1);
        const std::size_t hi = std::min(lo + 1, in - 1);
        taps.lo[i] = lo;
        taps.hi[i] = hi;
        taps.frac[i] = (hi == lo) ? 0.0 : src - static_cast<double>(lo);
    }
    return taps;
}

}  // namespace

Patch::Patch(Tensor values) : pixels(std::move(values)) {
    require_patch_shape(pixels);
    for (double v : pixels.values()) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("patch values must lie in [0, 1]");
    }
}

Patch Patch::filled(std::size_t height, std::size_t width, double value) {
    return Patch(Tensor({3, height, width}, std::clamp(value, 0.0, 1.0)));
}

Patch Patch::uniform(std::size_t height, std::size_t width, Rng& rng) {
    Tensor t({3, height, width});
    for (double& v : t.values()) v = rng.uniform();
    return Patch(std::move(t));
}

void Patch::project() { clamp_inplace(pixels, 0.0, 1.0); }

void validate_placement(const Placement& p, std::size_t image_height, std::size_t image_width) {
    if (p.height == 0 || p.width == 0) {
        throw std::invalid_argument("placement render size must be at least 1x1");
    }
    if (p.x + p.width > image_width || p.y + p.height > image_height) {
        throw std::invalid_argument(
            "placement out of bounds: rectangle x=[" + std::to_string(p.x) + ", " +
            std::to_string(p.x + p.width) + ") y=[" + std::to_string(p.y) + ", " +
            std::to_string(p.y + p.height) + ") exceeds image " + std::to_string(image_width) + "x" +
            std::to_string(image_height));
    }
}

void TransformConfig::validate() const {
    validate_range(contrast, "contrast");
    validate_range(brightness, "brightness");
    validate_range(noise, "noise");
}

TransformSample sample_transform(const TransformConfig& config, std::size_t height, std::size_t width,
                                 Rng& rng) {
    config.validate();
    TransformSample s;
    s.contrast = rng.uniform(config.contrast.lo, config.contrast.hi);
    s.brightness = rng.uniform(config.brightness.lo, config.brightness.hi);
    s.noise = Tensor({3, height, width});
    for (double& v : s.noise.values()) v = rng.uniform(config.noise.lo, config.noise.hi);
    return s;
}

Patch apply_transform(const Patch& patch, const TransformSample& sample) {
    if (sample.noise.shape() != patch.pixels.shape()) {
        throw std::invalid_argument("transform noise shape does not match patch");
    }
    Tensor out(patch.pixels.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::clamp(sample.contrast * patch.pixels[i] + sample.brightness + sample.noise[i], 0.0, 1.0);
    }
    return Patch(std::move(out));
}

Tensor apply_transform_backward(const Patch& patch, const TransformSample& sample, const Tensor& grad_out) {
    Tensor g(patch.pixels.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double pre = sample.contrast * patch.pixels[i] + sample.brightness + sample.noise[i];
        g[i] = (pre >= 0.0 && pre <= 1.0) ? sample.contrast * grad_out[i] : 0.0;
    }
    return g;
}

Patch transform_patch(const Patch& patch, const TransformConfig& config, Rng& rng) {
    return apply_transform(patch, sample_transform(config, patch.height(), patch.width(), rng));
}

Tensor latent_shift(const Tensor& value, const Tensor& mask, double alpha) {
    if (value.shape() != mask.shape()) {
        throw std::invalid_argument("latent shift shape mismatch: value " + shape_string(value.shape()) +
                                    " vs mask " + shape_string(mask.shape()));
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw std::invalid_argument("latent shift alpha must lie in [0, 1]");
    }
    Tensor out(value.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - alpha) * value[i] + alpha * mask[i];
    return out;
}

Patch latent_shift(const Patch& value, const Patch& mask, double alpha) {
    Tensor out = latent_shift(value.pixels, mask.pixels, alpha);
    for (double& v : out.values()) v = std::clamp(v, 0.0, 1.0);
    return Patch(std::move(out));
}

Tensor latent_shift_backward(const Patch& value, const Patch& mask, double alpha, const Tensor& grad_out) {
    Tensor g(value.pixels.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double pre = (1.0 - alpha) * value.pixels[i] + alpha * mask.pixels[i];
        g[i] = (pre >= 0.0 && pre <= 1.0) ? (1.0 - alpha) * grad_out[i] : 0.0;
    }
    return g;
}

double total_variation(const Patch& patch) {
    const Tensor& p = patch.pixels;
    const std::size_t c = p.dim(0), h = p.dim(1), w = p.dim(2);
    double tv = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                if (i + 1 < h) tv += std::abs(p.at(ch, i + 1, j) - p.at(ch, i, j));
                if (j + 1 < w) tv += std::abs(p.at(ch, i, j + 1) - p.at(ch, i, j));
            }
        }
    }
    return tv;
}

Tensor total_variation_gradient(const Patch& patch) {
    const Tensor& p = patch.pixels;
    const std::size_t c = p.dim(0), h = p.dim(1), w = p.dim(2);
    Tensor g(p.shape());
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                if (i + 1 < h) {
                    const double s = sign(p.at(ch, i + 1, j) - p.at(ch, i, j));
                    g.at(ch, i + 1, j) += s;
                    g.at(ch, i, j) -= s;
                }
                if (j + 1 < w) {
                    const double s = sign(p.at(ch, i, j + 1) - p.at(ch, i, j));
                    g.at(ch, i, j + 1) += s;
                    g.at(ch, i, j) -= s;
                }
            }
        }
    }
    return g;
}

Tensor resize_bilinear(const Tensor& image, std::size_t out_height, std::size_t out_width) {
    if (image.rank() != 3) throw std::invalid_argument("resize_bilinear expects (C, H, W)");
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (out_height == h && out_width == w) return image;
    const AxisTaps ty = axis_taps(h, out_height);
    const AxisTaps tx = axis_taps(w, out_width);
    Tensor out({c, out_height, out_width});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < out_height; ++i) {
            const double fy = ty.frac[i];
            for (std::size_t j = 0; j < out_width; ++j) {
                const double fx = tx.frac[j];
                const double top = (1 - fx) * image.at(ch, ty.lo[i], tx.lo[j]) + fx * image.at(ch, ty.lo[i], tx.hi[j]);
                const double bot = (1 - fx) * image.at(ch, ty.hi[i], tx.lo[j]) + fx * image.at(ch, ty.hi[i], tx.hi[j]);
                out.at(ch, i, j) = (1 - fy) * top + fy * bot;
            }
        }
    }
    return out;
}

Tensor resize_bilinear_backward(const Tensor& grad_out, std::size_t in_height, std::size_t in_width) {
    const std::size_t c = grad_out.dim(0), oh = grad_out.dim(1), ow = grad_out.dim(2);
    if (oh == in_height && ow == in_width) return grad_out;
    const AxisTaps ty = axis_taps(in_height, oh);
    const AxisTaps tx = axis_taps(in_width, ow);
    Tensor g({c, in_height, in_width});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < oh; ++i) {
            const double fy = ty.frac[i];
            for (std::size_t j = 0; j < ow; ++j) {
                const double fx = tx.frac[j];
                const double go = grad_out.at(ch, i, j);
                g.at(ch, ty.lo[i], tx.lo[j]) += (1 - fy) * (1 - fx) * go;
                g.at(ch, ty.lo[i], tx.hi[j]) += (1 - fy) * fx * go;
                g.at(ch, ty.hi[i], tx.lo[j]) += fy * (1 - fx) * go;
                g.at(ch, ty.hi[i], tx.hi[j]) += fy * fx * go;
            }
        }
    }
    return g;
}

Tensor apply_patch(const Tensor& image, const Patch& patch, const Placement& placement) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument("apply_patch expects a (3, H, W) image, got " + shape_string(image.shape()));
    }
    validate_placement(placement, image.dim(1), image.dim(2));
    const Tensor rendered = resize_bilinear(patch.pixels, placement.height, placement.width);
    Tensor out = image;
    for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < placement.height; ++i) {
            for (std::size_t j = 0; j < placement.width; ++j) {
                out.at(ch, placement.y + i, placement.x + j) = rendered.at(ch, i, j);
            }
        }
    }
    return out;
}

Tensor apply_patch_backward(const Tensor& grad_image, const Patch& patch, const Placement& placement) {
    Tensor region({3, placement.height, placement.width});
    for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t i = 0; i < placement.height; ++i) {
            for (std::size_t j = 0; j < placement.width; ++j) {
                region.at(ch, i, j) = grad_image.at(ch, placement.y + i, placement.x + j);
            }
        }
    }
    return resize_bilinear_backward(region, patch.height(), patch.width());
}

void save_patch(const std::filesystem::path& png_path, const Patch& patch, const PatchMetadata& meta) {
    save_png(png_path, patch.pixels);
    nlohmann::json j{{"native_size", {meta.native_height, meta.native_width}},
                     {"config_hash", meta.config_hash},
                     {"seed", meta.seed}};
    for (const auto& [k, v] : meta.extra.items()) j[k] = v;
    std::filesystem::path sidecar = png_path;
    sidecar.replace_extension(".json");
    std::ofstream(sidecar) << j.dump(2) << '\n';
}

Patch load_patch(const std::filesystem::path& png_path) { return Patch(load_image(png_path)); }

PatchMetadata load_patch_metadata(const std::filesystem::path& png_path) {
    std::filesystem::path sidecar = png_path;
    sidecar.replace_extension(".json");
    std::ifstream in(sidecar);
    if (!in) throw std::runtime_error("missing patch metadata " + sidecar.string());
    const nlohmann::json j = nlohmann::json::parse(in);
    PatchMetadata meta;
    meta.native_height = j.at("native_size").at(0);
    meta.native_width = j.at("native_size").at(1);
    meta.config_hash = j.value("config_hash", "");
    meta.seed = j.value("seed", std::uint64_t{0});
    for (const auto& [k, v] : j.items()) {
        if (k != "native_size" && k != "config_hash" && k != "seed") meta.extra[k] = v;
    }
    return meta;
}

nlohmann::json to_json(const Placement& p) {
    return {{"x", p.x}, {"y", p.y}, {"height", p.height}, {"width", p.width}};
}

Placement placement_from_json(const nlohmann::json& j) {
    return Placement{j.at("x"), j.at("y"), j.at("height"), j.at("width")};
}

nlohmann::json to_json(const TransformConfig& c) {
    return {{"contrast", {c.contrast.lo, c.contrast.hi}},
            {"brightness", {c.brightness.lo, c.brightness.hi}},
            {"noise", {c.noise.lo, c.noise.hi}}};
}

TransformConfig transform_config_from_json(const nlohmann::json& j) {
    TransformConfig c;
    auto range = [&](const char* key, Range& r) {
        if (j.contains(key)) r = Range{j.at(key).at(0), j.at(key).at(1)};
    };
    range("contrast", c.contrast);
    range("brightness", c.brightness);
    range("noise", c.noise);
    c.validate();
    return c;
}

}  // namespace natpatch
