#include "experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

#include <opencv2/imgproc.hpp>

#include "natpatch/darknet.hpp"
#include "natpatch/image_io.hpp"
#include "natpatch/mock_detector.hpp"

namespace natpatch::cli {

nlohmann::json default_config() {
    const GeneratorArch arch;
    return {
        {"name", "run"},
        {"seed", 0},
        {"output_dir", ""},
        {"detector",
         {{"kind", "mock-shape"},
          {"weights", ""},
          {"cfg", ""},
          {"names", ""},
          {"input_size", 64},
          {"grid", 8},
          {"hidden", 4},
          {"classes", {"red", "green", "blue"}},
          {"init_stddev", 0.3},
          {"confidence_threshold", 0.5},
          {"nms_threshold", 0.45}}},
        {"dataset",
         {{"kind", "synthetic"},
          {"sources", nlohmann::json::array()},
          {"classes", nlohmann::json::array()},
          {"train_annotations", ""},
          {"test_annotations", ""},
          {"image_root", ""},
          {"limit", 0},
          {"seed", 7},
          {"images", 10},
          {"test_images", 10},
          {"shapes_per_image", 3},
          {"height", 64},
          {"width", 64},
          {"min_shape", 8},
          {"max_shape", 20}}},
        {"generator", {{"arch", arch.to_json()}, {"weights", ""}}},
        {"gan",
         {{"steps", 1000},
          {"batch", 64},
          {"lr", 2e-4},
          {"beta1", 0.5},
          {"beta2", 0.999},
          {"checkpoint_every", 500},
          {"grid_samples", 16},
          {"grid_columns", 4},
          {"corpus",
           {{"kind", "flowers"}, {"root", ""}, {"exclusions", ""}, {"count", 256}, {"seed", 11}}}}},
        {"attack", [] {
             nlohmann::json a = AttackConfig{}.to_json();
             a.erase("seed");
             return a;
         }()},
        {"eval",
         {{"iou_threshold", 0.5},
          {"patch", ""},
          {"black_baseline", true},
          {"render", 0},
          {"threads", 0}}},
    };
}

void merge_config(nlohmann::json& base, const nlohmann::json& overlay, const std::string& prefix) {
    if (!overlay.is_object()) throw std::invalid_argument("config " + (prefix.empty() ? "root" : prefix) + " must be an object");
    for (const auto& [key, value] : overlay.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw std::invalid_argument("unknown config key: " + path);
        nlohmann::json& slot = base[key];
        if (slot.is_object()) {
            merge_config(slot, value, path);
            continue;
        }
        const bool both_numbers = slot.is_number() && value.is_number();
        if (!both_numbers && slot.type() != value.type()) {
            throw std::invalid_argument("config key " + path + " expects " + std::string(slot.type_name()) + ", got " +
                                        value.type_name());
        }
        if (slot.is_number_unsigned() || slot.is_number_integer()) {
            if (!value.is_number_integer() && !value.is_number_unsigned()) {
                throw std::invalid_argument("config key " + path + " expects an integer");
            }
            if (slot.is_number_unsigned() && value.get<long long>() < 0) {
                throw std::invalid_argument("config key " + path + " must not be negative");
            }
        }
        slot = value;
    }
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must be key=value, got " + assignment);
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    nlohmann::json overlay = std::move(value);
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) parts.push_back(rest.substr(0, pos));
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) overlay = nlohmann::json{{*it, std::move(overlay)}};
    merge_config(config, overlay);
}

nlohmann::json resolve_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
    nlohmann::json config = default_config();
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw std::invalid_argument("cannot open config file " + file.string());
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(in, nullptr, true, true);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::invalid_argument("config file " + file.string() + ": " + e.what());
        }
        merge_config(config, j);
    }
    for (const auto& o : overrides) apply_override(config, o);
    return config;
}

void validate_config(const nlohmann::json& c) {
    std::vector<std::string> problems;
    auto check = [&](bool ok, const std::string& msg) {
        if (!ok) problems.push_back(msg);
    };
    const std::string dk = c["detector"]["kind"];
    check(dk == "mock-shape" || dk == "mock-random" || dk == "mock" || dk == "darknet",
          "detector.kind must be mock-shape, mock-random, mock or darknet");
    if (dk == "mock") check(!c["detector"]["weights"].get<std::string>().empty(), "detector.weights is required for kind mock");
    if (dk == "darknet") {
        for (const char* k : {"cfg", "weights", "names"}) {
            check(!c["detector"][k].get<std::string>().empty(), std::string("detector.") + k + " is required for kind darknet");
        }
    }
    const double ct = c["detector"]["confidence_threshold"], nt = c["detector"]["nms_threshold"];
    check(ct >= 0 && ct <= 1, "detector.confidence_threshold must lie in [0, 1]");
    check(nt >= 0 && nt <= 1, "detector.nms_threshold must lie in [0, 1]");
    const std::string kind = c["dataset"]["kind"];
    check(kind == "synthetic" || kind == "coco", "dataset.kind must be synthetic or coco");
    const double iou = c["eval"]["iou_threshold"];
    check(iou > 0 && iou <= 1, "eval.iou_threshold must lie in (0, 1]");
    const std::string ck = c["gan"]["corpus"]["kind"];
    check(ck == "flowers" || ck == "directory", "gan.corpus.kind must be flowers or directory");
    if (ck == "directory") check(!c["gan"]["corpus"]["root"].get<std::string>().empty(), "gan.corpus.root is required for kind directory");
    check(c["gan"]["batch"].get<long long>() > 0, "gan.batch must be positive");
    check(c["gan"]["lr"].get<double>() > 0, "gan.lr must be positive");
    try {
        AttackConfig::from_json(c["attack"]);
    } catch (const std::invalid_argument& e) {
        problems.push_back(e.what());
    }
    try {
        GeneratorArch::from_json(c["generator"]["arch"]);
    } catch (const std::invalid_argument& e) {
        problems.push_back(std::string("generator.arch: ") + e.what());
    }
    if (!problems.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& p : problems) msg += "\n  - " + p;
        throw std::invalid_argument(msg);
    }
}

std::filesystem::path output_directory(const nlohmann::json& config, const std::string& command) {
    const std::string explicit_dir = config["output_dir"];
    if (!explicit_dir.empty()) return explicit_dir;
    const char* env = std::getenv("NATPATCH_OUTPUT_ROOT");
    const std::filesystem::path root = env && *env ? env : "runs";
    return root / config["name"].get<std::string>() / command;
}

AttackConfig attack_config(const nlohmann::json& config) {
    AttackConfig a = AttackConfig::from_json(config["attack"]);
    a.seed = config["seed"];
    return a;
}

GeneratorArch generator_arch(const nlohmann::json& config) { return GeneratorArch::from_json(config["generator"]["arch"]); }

std::unique_ptr<DetectorAdapter> make_detector(const nlohmann::json& config) {
    const auto& d = config["detector"];
    const std::string kind = d["kind"];
    std::unique_ptr<DetectorAdapter> det;
    if (kind == "darknet") {
        det = std::make_unique<DarknetDetector>(DarknetDetector::load(d["cfg"].get<std::string>(),
                                                                      d["weights"].get<std::string>(),
                                                                      d["names"].get<std::string>()));
    } else if (kind == "mock") {
        det = std::make_unique<MockDetector>(MockDetector::load(d["weights"].get<std::string>()));
    } else {
        MockDetectorConfig mc;
        mc.input_size = d["input_size"];
        mc.grid = d["grid"];
        mc.hidden = d["hidden"];
        mc.classes = d["classes"].get<std::vector<std::string>>();
        if (kind == "mock-shape") det = std::make_unique<MockDetector>(MockDetector::shape_detector(mc));
        else det = std::make_unique<MockDetector>(MockDetector::random(mc, config["seed"], d["init_stddev"]));
    }
    det->set_thresholds(d["confidence_threshold"], d["nms_threshold"]);
    return det;
}

namespace {

SyntheticSpec synthetic_spec(const nlohmann::json& d, const std::string& split) {
    SyntheticSpec s;
    s.images = split == "train" ? d["images"].get<std::size_t>() : d["test_images"].get<std::size_t>();
    s.shapes_per_image = d["shapes_per_image"];
    s.height = d["height"];
    s.width = d["width"];
    s.min_shape = d["min_shape"];
    s.max_shape = d["max_shape"];
    s.split = split;
    return s;
}

// GT class ids follow the detector's class list, matched by name.
std::vector<PreparedSample> remap_to_detector(std::vector<PreparedSample> samples, const DetectionDataset& ds,
                                              const std::vector<std::string>& detector_classes) {
    const auto names = ds.class_names();
    std::vector<int> map(names.size(), -1);
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto it = std::find(detector_classes.begin(), detector_classes.end(), names[i]);
        if (it != detector_classes.end()) map[i] = static_cast<int>(it - detector_classes.begin());
    }
    for (auto& s : samples) {
        for (auto& l : s.labels) {
            if (map[static_cast<std::size_t>(l.class_id)] < 0) {
                throw std::invalid_argument("dataset class " + names[static_cast<std::size_t>(l.class_id)] +
                                            " is not known to the detector");
            }
            l.class_id = map[static_cast<std::size_t>(l.class_id)];
        }
    }
    return samples;
}

}  // namespace

LoadedDataset load_split(const nlohmann::json& config, const std::string& split, const DetectorAdapter& detector) {
    const auto& d = config["dataset"];
    LoadedDataset out;
    std::vector<Tensor> preloaded;
    if (d["kind"] == "synthetic") {
        const SyntheticSpec spec = synthetic_spec(d, split);
        Rng rng = Rng::derive(d["seed"], "synthetic-" + split);
        SyntheticDataset syn = make_synthetic_dataset(spec, rng);
        out.dataset = std::move(syn.dataset);
        preloaded = std::move(syn.images);
    } else {
        const std::string file = d[split + "_annotations"];
        if (file.empty()) throw std::invalid_argument("dataset." + split + "_annotations is not set");
        std::filesystem::path root = d["image_root"].get<std::string>();
        if (root.empty()) root = std::filesystem::path(file).parent_path();
        out.dataset = load_coco(file, root);
    }
    const std::size_t limit = d["limit"];
    if (limit > 0 && out.dataset.images.size() > limit) {
        out.dataset.images.resize(limit);
        if (!preloaded.empty()) preloaded.resize(limit);
        std::erase_if(out.dataset.annotations, [&](const Annotation& a) {
            return std::none_of(out.dataset.images.begin(), out.dataset.images.end(),
                                [&](const ImageRecord& r) { return r.id == a.image_id; });
        });
    }
    out.samples = remap_to_detector(
        prepare_samples(out.dataset, detector.input_size(), preloaded.empty() ? nullptr : &preloaded), out.dataset,
        detector.class_names());
    return out;
}

Tensor crop_and_resize(const Tensor& image, std::size_t size) {
    cv::Mat m = to_mat(image);
    const int side = std::min(m.rows, m.cols);
    const cv::Rect roi((m.cols - side) / 2, (m.rows - side) / 2, side, side);
    cv::Mat resized;
    const int s = static_cast<int>(size);
    cv::resize(m(roi), resized, cv::Size(s, s), 0, 0, side > s ? cv::INTER_AREA : cv::INTER_LINEAR);
    return from_mat(resized);
}

GanCorpus load_gan_corpus(const nlohmann::json& config, std::size_t size, std::vector<std::string>* warnings) {
    const auto& c = config["gan"]["corpus"];
    const GeneratorArch arch = generator_arch(config);
    GanCorpus corpus;
    if (c["kind"] == "flowers") {
        Rng rng = Rng::derive(c["seed"], "flowers");
        std::vector<int> modes;
        corpus.images = make_flower_corpus(c["count"], size, rng, &modes);
        if (arch.conditional()) corpus.labels = modes;
        return corpus;
    }
    const std::filesystem::path root = c["root"].get<std::string>();
    const ImageCorpus listing = load_corpus(root, c["exclusions"].get<std::string>());
    if (warnings) warnings->insert(warnings->end(), listing.warnings.begin(), listing.warnings.end());
    if (listing.paths.empty()) throw std::runtime_error("GAN corpus " + root.string() + " is empty");
    // Conditional corpora take their class from the first directory level.
    std::map<std::string, int> class_of;
    for (const auto& p : listing.paths) {
        const std::string top = p.lexically_relative(root).begin()->string();
        class_of.emplace(top, 0);
    }
    int next = 0;
    for (auto& [name, id] : class_of) id = next++;
    for (const auto& p : listing.paths) {
        corpus.images.push_back(crop_and_resize(load_image(p), size));
        if (arch.conditional()) corpus.labels.push_back(class_of.at(p.lexically_relative(root).begin()->string()));
    }
    if (arch.conditional() && class_of.size() > arch.num_classes) {
        throw std::invalid_argument("corpus has " + std::to_string(class_of.size()) + " class folders but the generator has " +
                                    std::to_string(arch.num_classes) + " classes");
    }
    return corpus;
}

std::string progress_line(const std::string& event, const std::vector<std::pair<std::string, double>>& fields) {
    std::string line = "event=" + event;
    char buf[64];
    for (const auto& [k, v] : fields) {
        std::snprintf(buf, sizeof(buf), "%.6g", v);
        line += " " + k + "=" + buf;
    }
    return line;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, n);
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace natpatch::cli
