#include "natpatch/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <opencv2/imgcodecs.hpp>

#include "natpatch/image_io.hpp"
#include "natpatch/patch.hpp"

namespace natpatch {

namespace {

bool is_train_tag(const std::string& s) { return s == "train" || s.rfind("train", 0) == 0; }
bool is_test_tag(const std::string& s) {
    return s == "val" || s == "test" || s.rfind("val", 0) == 0 || s.rfind("test", 0) == 0;
}

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

}  // namespace

void DetectionDataset::validate() const {
    std::unordered_map<long long, const ImageRecord*> by_id;
    for (const auto& img : images) {
        if (!by_id.emplace(img.id, &img).second) {
            throw std::invalid_argument("duplicate image id " + std::to_string(img.id));
        }
    }
    std::unordered_set<long long> cats;
    for (const auto& c : categories) cats.insert(c.id);
    for (const auto& a : annotations) {
        auto it = by_id.find(a.image_id);
        if (it == by_id.end()) {
            throw std::invalid_argument("annotation " + std::to_string(a.id) + " references missing image " +
                                        std::to_string(a.image_id));
        }
        if (!cats.contains(a.category_id)) {
            throw std::invalid_argument("annotation " + std::to_string(a.id) + " has unknown category " +
                                        std::to_string(a.category_id));
        }
        const ImageRecord& img = *it->second;
        constexpr double slack = 1e-6;
        if (img.width > 0 && img.height > 0 &&
            (a.bbox.x1 < -slack || a.bbox.y1 < -slack || a.bbox.x2 > static_cast<double>(img.width) + slack ||
             a.bbox.y2 > static_cast<double>(img.height) + slack)) {
            throw std::invalid_argument("annotation " + std::to_string(a.id) + " box lies outside image " +
                                        std::to_string(img.id));
        }
    }
}

std::vector<const Annotation*> DetectionDataset::annotations_for(long long image_id) const {
    std::vector<const Annotation*> out;
    for (const auto& a : annotations) {
        if (a.image_id == image_id) out.push_back(&a);
    }
    return out;
}

int DetectionDataset::class_index(long long category_id) const {
    for (std::size_t i = 0; i < categories.size(); ++i) {
        if (categories[i].id == category_id) return static_cast<int>(i);
    }
    return -1;
}

std::vector<std::string> DetectionDataset::class_names() const {
    std::vector<std::string> out;
    for (const auto& c : categories) out.push_back(c.name);
    return out;
}

std::vector<long long> DetectionDataset::category_ids() const {
    std::vector<long long> out;
    for (const auto& c : categories) out.push_back(c.id);
    return out;
}

DetectionDataset load_coco(const std::filesystem::path& path, const std::filesystem::path& image_root,
                           const std::string& split) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read annotations " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed annotations " + path.string() + ": " + e.what());
    }
    DetectionDataset d;
    d.image_root = image_root;
    for (const auto& c : j.at("categories")) d.categories.push_back({c.at("id"), c.at("name")});
    for (const auto& im : j.at("images")) {
        ImageRecord r;
        r.id = im.at("id");
        r.file_name = im.at("file_name");
        r.width = im.value("width", std::size_t{0});
        r.height = im.value("height", std::size_t{0});
        r.split = im.value("split", split);
        d.images.push_back(std::move(r));
    }
    for (const auto& a : j.value("annotations", nlohmann::json::array())) {
        const auto& b = a.at("bbox");
        const double x = b.at(0), y = b.at(1), w = b.at(2), h = b.at(3);
        d.annotations.push_back({a.at("id"), a.at("image_id"), a.at("category_id"), Box{x, y, x + w, y + h}});
    }
    d.validate();
    return d;
}

nlohmann::json to_coco_json(const DetectionDataset& d) {
    nlohmann::json j;
    j["categories"] = nlohmann::json::array();
    for (const auto& c : d.categories) j["categories"].push_back({{"id", c.id}, {"name", c.name}});
    j["images"] = nlohmann::json::array();
    for (const auto& im : d.images) {
        j["images"].push_back({{"id", im.id},
                               {"file_name", im.file_name},
                               {"width", im.width},
                               {"height", im.height},
                               {"split", im.split}});
    }
    j["annotations"] = nlohmann::json::array();
    for (const auto& a : d.annotations) {
        j["annotations"].push_back({{"id", a.id},
                                    {"image_id", a.image_id},
                                    {"category_id", a.category_id},
                                    {"bbox", {a.bbox.x1, a.bbox.y1, a.bbox.width(), a.bbox.height()}},
                                    {"area", a.bbox.area()},
                                    {"iscrowd", 0}});
    }
    return j;
}

void write_coco(const std::filesystem::path& path, const DetectionDataset& dataset) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_coco_json(dataset).dump(1) << '\n';
}

DetectionDataset merge_datasets(const std::vector<DetectionDataset>& parts) {
    if (parts.empty()) return {};
    DetectionDataset out;
    out.categories = parts.front().categories;
    out.image_root = parts.front().image_root;
    for (const auto& p : parts) {
        if (p.class_names() != out.class_names() || p.category_ids() != out.category_ids()) {
            throw std::invalid_argument("cannot merge datasets with different category lists");
        }
        for (auto im : p.images) {
            // file names become relative to the first part's root
            if (p.image_root != out.image_root && !p.image_root.empty()) {
                im.file_name = (p.image_root / im.file_name).string();
            }
            out.images.push_back(std::move(im));
        }
        out.annotations.insert(out.annotations.end(), p.annotations.begin(), p.annotations.end());
    }
    out.validate();
    return out;
}

DetectionDataset filter_by_classes(const DetectionDataset& d, const std::set<std::string>& classes,
                                   FilterCounts* counts) {
    std::unordered_set<long long> keep_ids;
    for (const std::string& name : classes) {
        auto it = std::find_if(d.categories.begin(), d.categories.end(),
                               [&](const Category& c) { return c.name == name; });
        if (it == d.categories.end()) throw std::invalid_argument("unknown class name '" + name + "'");
        keep_ids.insert(it->id);
    }
    DetectionDataset out;
    out.image_root = d.image_root;
    out.categories = d.categories;
    std::unordered_set<long long> images_with_hits;
    for (const auto& a : d.annotations) {
        if (keep_ids.contains(a.category_id)) {
            out.annotations.push_back(a);
            images_with_hits.insert(a.image_id);
        }
    }
    for (const auto& im : d.images) {
        if (images_with_hits.contains(im.id)) out.images.push_back(im);
    }
    if (counts) {
        *counts = {d.images.size(), out.images.size(), d.annotations.size(), out.annotations.size()};
    }
    return out;
}

std::pair<DetectionDataset, DetectionDataset> split_dataset(const DetectionDataset& d, SplitProtocol) {
    DetectionDataset train, test;
    train.image_root = test.image_root = d.image_root;
    train.categories = test.categories = d.categories;
    std::unordered_set<long long> train_ids;
    for (const auto& im : d.images) {
        if (is_train_tag(im.split)) {
            train.images.push_back(im);
            train_ids.insert(im.id);
        } else if (is_test_tag(im.split)) {
            test.images.push_back(im);
        } else {
            throw std::invalid_argument("image " + std::to_string(im.id) + " (" + im.file_name +
                                        ") has no split provenance");
        }
    }
    for (const auto& a : d.annotations) (train_ids.contains(a.image_id) ? train : test).annotations.push_back(a);
    return {std::move(train), std::move(test)};
}

nlohmann::json dataset_summary(const DetectionDataset& d) {
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& c : d.categories) per_class[c.name] = 0;
    std::unordered_map<long long, std::string> names;
    for (const auto& c : d.categories) names[c.id] = c.name;
    for (const auto& a : d.annotations) per_class[names[a.category_id]] = per_class[names[a.category_id]].get<int>() + 1;
    std::map<std::string, std::size_t> splits;
    for (const auto& im : d.images) ++splits[im.split];
    return {{"images", d.images.size()},
            {"annotations", d.annotations.size()},
            {"annotations_per_class", per_class},
            {"split_sizes", splits}};
}

// ---------------------------------------------------------------------------

std::set<std::string> read_exclusion_list(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read exclusion list " + path.string());
    std::set<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (!line.empty()) out.insert(std::filesystem::path(line).lexically_normal().generic_string());
    }
    return out;
}

ImageCorpus load_corpus(const std::filesystem::path& root, const std::filesystem::path& exclusion_list) {
    if (!std::filesystem::is_directory(root)) {
        throw std::runtime_error("corpus directory " + root.string() + " does not exist");
    }
    const std::set<std::string> excluded =
        exclusion_list.empty() ? std::set<std::string>{} : read_exclusion_list(exclusion_list);
    ImageCorpus corpus;
    corpus.root = root;
    std::vector<std::filesystem::path> all;
    for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) all.push_back(e.path());
    }
    std::sort(all.begin(), all.end());
    for (const auto& p : all) {
        const std::string rel = p.lexically_relative(root).lexically_normal().generic_string();
        if (excluded.contains(rel)) {
            ++corpus.excluded;
            continue;
        }
        if (!cv::haveImageReader(p.string())) {
            ++corpus.unreadable;
            corpus.warnings.push_back("skipping unreadable image " + p.string());
            continue;
        }
        corpus.paths.push_back(p);
    }
    if (corpus.paths.empty()) {
        corpus.warnings.push_back("corpus " + root.string() + " is empty after exclusions");
    }
    return corpus;
}

// ---------------------------------------------------------------------------

void SyntheticSpec::validate() const {
    if (height < 4 || width < 4) throw std::invalid_argument("synthetic canvas must be at least 4x4");
    if (min_shape == 0 || min_shape > max_shape) throw std::invalid_argument("synthetic shape size bounds invalid");
    if (max_shape > std::min(height, width)) throw std::invalid_argument("synthetic shapes larger than canvas");
    if (classes.empty()) throw std::invalid_argument("synthetic dataset needs at least one class");
}

namespace {

constexpr double kPalette[6][3] = {{0.92, 0.15, 0.12}, {0.15, 0.88, 0.20}, {0.12, 0.25, 0.95},
                                   {0.95, 0.90, 0.15}, {0.90, 0.20, 0.90}, {0.15, 0.90, 0.90}};

}  // namespace

SyntheticDataset make_synthetic_dataset(const SyntheticSpec& spec, Rng& rng) {
    spec.validate();
    SyntheticDataset out;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        out.dataset.categories.push_back({static_cast<long long>(c + 1), spec.classes[c]});
    }
    long long ann_id = 1;
    for (std::size_t n = 0; n < spec.images; ++n) {
        Tensor img({3, spec.height, spec.width});
        for (std::size_t y = 0; y < spec.height; ++y) {
            for (std::size_t x = 0; x < spec.width; ++x) {
                const double base = rng.uniform(0.15, 0.35);
                for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = base + rng.uniform(-0.03, 0.03);
            }
        }
        const long long image_id = static_cast<long long>(n + 1);
        for (std::size_t s = 0; s < spec.shapes_per_image; ++s) {
            const std::size_t cls = rng.index(spec.classes.size());
            const std::size_t w = spec.min_shape + rng.index(spec.max_shape - spec.min_shape + 1);
            const std::size_t h = spec.min_shape + rng.index(spec.max_shape - spec.min_shape + 1);
            const std::size_t x0 = rng.index(spec.width - w + 1);
            const std::size_t y0 = rng.index(spec.height - h + 1);
            const bool ellipse = rng.uniform() < 0.5;
            const double* colour = kPalette[cls % 6];
            for (std::size_t y = y0; y < y0 + h; ++y) {
                for (std::size_t x = x0; x < x0 + w; ++x) {
                    if (ellipse) {
                        const double dx = (static_cast<double>(x - x0) + 0.5) / static_cast<double>(w) - 0.5;
                        const double dy = (static_cast<double>(y - y0) + 0.5) / static_cast<double>(h) - 0.5;
                        if (dx * dx + dy * dy > 0.25) continue;
                    }
                    for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = colour[c];
                }
            }
            out.dataset.annotations.push_back(
                {ann_id++, image_id, static_cast<long long>(cls + 1),
                 Box{static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x0 + w),
                     static_cast<double>(y0 + h)}});
        }
        out.dataset.images.push_back(
            {image_id, "images/" + std::to_string(image_id) + ".png", spec.width, spec.height, spec.split});
        out.images.push_back(std::move(img));
    }
    out.dataset.validate();
    return out;
}

void write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticDataset& data) {
    std::filesystem::create_directories(dir / "images");
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        save_png(dir / data.dataset.images[i].file_name, data.images[i]);
    }
    write_coco(dir / "annotations.json", data.dataset);
}

std::vector<Tensor> make_flower_corpus(std::size_t count, std::size_t size, Rng& rng, std::vector<int>* modes) {
    std::vector<Tensor> out;
    out.reserve(count);
    if (modes) modes->clear();
    for (std::size_t n = 0; n < count; ++n) {
        const int mode = rng.uniform() < 0.5 ? 0 : 1;
        Tensor img({3, size, size});
        const double cx = (0.5 + rng.uniform(-0.1, 0.1)) * static_cast<double>(size);
        const double cy = (0.5 + rng.uniform(-0.1, 0.1)) * static_cast<double>(size);
        const double radius = rng.uniform(0.28, 0.38) * static_cast<double>(size);
        const double petals = mode == 0 ? 8.0 : 5.0;
        const double phase = rng.uniform(0.0, 6.283185307179586);
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                const double dx = static_cast<double>(x) + 0.5 - cx;
                const double dy = static_cast<double>(y) + 0.5 - cy;
                const double r = std::sqrt(dx * dx + dy * dy);
                const double theta = std::atan2(dy, dx);
                const double edge = radius * (0.75 + 0.25 * std::cos(petals * theta + phase));
                double rgb[3] = {0.15, 0.45 + 0.1 * rng.uniform(), 0.12};  // foliage
                if (r < 0.3 * radius) {
                    if (mode == 0) {
                        rgb[0] = 0.95; rgb[1] = 0.80; rgb[2] = 0.10;  // yellow disc
                    } else {
                        rgb[0] = 0.25; rgb[1] = 0.10; rgb[2] = 0.05;  // dark centre
                    }
                } else if (r < edge) {
                    if (mode == 0) {
                        rgb[0] = 0.95; rgb[1] = 0.95; rgb[2] = 0.92;  // white petals
                    } else {
                        rgb[0] = 0.90; rgb[1] = 0.15; rgb[2] = 0.25;  // red petals
                    }
                }
                for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = std::clamp(rgb[c] + rng.uniform(-0.02, 0.02), 0.0, 1.0);
            }
        }
        out.push_back(std::move(img));
        if (modes) modes->push_back(mode);
    }
    return out;
}

std::vector<PreparedSample> prepare_samples(const DetectionDataset& d, std::size_t size,
                                            const std::vector<Tensor>* preloaded) {
    if (preloaded && preloaded->size() != d.images.size()) {
        throw std::invalid_argument("preloaded images do not match the dataset");
    }
    std::vector<PreparedSample> out;
    out.reserve(d.images.size());
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        const ImageRecord& rec = d.images[i];
        const Tensor raw = preloaded ? (*preloaded)[i] : load_image(d.image_root / rec.file_name);
        const Letterbox lb = Letterbox::fit(raw.dim(1), raw.dim(2), size);
        PreparedSample s;
        s.image_id = rec.id;
        s.image = letterbox_image(raw, lb);
        for (const Annotation* a : d.annotations_for(rec.id)) {
            s.labels.push_back({lb.to_network(a->bbox), d.class_index(a->category_id)});
        }
        out.push_back(std::move(s));
    }
    return out;
}

Tensor sample_batch(const std::vector<Tensor>& images, std::size_t batch, std::size_t size, Rng& rng) {
    if (images.empty()) throw std::invalid_argument("cannot sample a batch from an empty corpus");
    if (batch == 0) throw std::invalid_argument("batch size must be positive");
    Tensor out({batch, 3, size, size});
    for (std::size_t b = 0; b < batch; ++b) {
        const Tensor& img = images[rng.index(images.size())];
        out.set_slice(b, resize_bilinear(img, size, size));
    }
    return out;
}

}  // namespace natpatch
