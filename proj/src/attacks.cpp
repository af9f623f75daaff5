#include "natpatch/attacks.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "natpatch/archive.hpp"
#include "natpatch/eval.hpp"

namespace fs = std::filesystem;

namespace natpatch {

std::string to_string(AttackMode m) { return m == AttackMode::universal ? "universal" : "per_instance"; }

std::string to_string(PatchSource s) {
    switch (s) {
        case PatchSource::pixel: return "pixel";
        case PatchSource::frozen_generator: return "frozen_generator";
        case PatchSource::trained_generator: return "trained_generator";
    }
    return "?";
}

std::string to_string(CombinedVariant v) {
    switch (v) {
        case CombinedVariant::v1: return "V1";
        case CombinedVariant::v2: return "V2";
        case CombinedVariant::v3: return "V3";
    }
    return "?";
}

void AttackConfig::validate() const {
    std::vector<std::string> errors;
    if (!(patch_lr > 0.0) || !std::isfinite(patch_lr)) errors.push_back("patch_lr must be > 0");
    if (!(gan_lr > 0.0) || !std::isfinite(gan_lr)) errors.push_back("gan_lr must be > 0");
    if (epochs < 1) errors.push_back("epochs must be >= 1");
    if (!(tv_weight >= 0.0)) errors.push_back("tv_weight must be >= 0");
    if (!(latent_shift_alpha >= 0.0 && latent_shift_alpha <= 1.0)) errors.push_back("latent_shift_alpha must be in [0, 1]");
    if (placement.height == 0 || placement.width == 0) errors.push_back("placement must have a positive size");
    if (gan_batch == 0) errors.push_back("gan_batch must be >= 1");
    if (checkpoint_every == 0) errors.push_back("checkpoint_every must be >= 1");
    if (!(proximity_radius > 0.0)) errors.push_back("proximity_radius must be > 0");
    if (!(v2_gan_weight >= 0.0) || !(v2_detector_weight >= 0.0)) errors.push_back("V2 loss weights must be >= 0");
    try {
        transform_config.validate();
    } catch (const std::invalid_argument& e) {
        errors.push_back(e.what());
    }
    if (!errors.empty()) {
        std::string msg = "invalid attack config:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw std::invalid_argument(msg);
    }
}

nlohmann::json AttackConfig::to_json() const {
    return {{"mode", to_string(mode)},
            {"source", to_string(source)},
            {"patch_lr", patch_lr},
            {"epochs", epochs},
            {"tv_weight", tv_weight},
            {"transform", transform},
            {"transform_config", natpatch::to_json(transform_config)},
            {"latent_shift", latent_shift},
            {"latent_shift_alpha", latent_shift_alpha},
            {"placement", natpatch::to_json(placement)},
            {"seed", seed},
            {"gan_lr", gan_lr},
            {"variant", to_string(variant)},
            {"v2_gan_weight", v2_gan_weight},
            {"v2_detector_weight", v2_detector_weight},
            {"patch_class", patch_class},
            {"gan_batch", gan_batch},
            {"checkpoint_every", checkpoint_every},
            {"proximity_radius", proximity_radius}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("attack config must be an object");
    const AttackConfig defaults;
    const nlohmann::json known = defaults.to_json();
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw std::invalid_argument("unknown attack config key: " + key);
    }
    AttackConfig c;
    try {
        if (j.contains("mode")) {
            const std::string m = j.at("mode");
            if (m == "universal") c.mode = AttackMode::universal;
            else if (m == "per_instance") c.mode = AttackMode::per_instance;
            else throw std::invalid_argument("mode must be universal or per_instance, got " + m);
        }
        if (j.contains("source")) {
            const std::string s = j.at("source");
            if (s == "pixel") c.source = PatchSource::pixel;
            else if (s == "frozen_generator") c.source = PatchSource::frozen_generator;
            else if (s == "trained_generator") c.source = PatchSource::trained_generator;
            else throw std::invalid_argument("source must be pixel, frozen_generator or trained_generator, got " + s);
        }
        if (j.contains("variant")) {
            const std::string v = j.at("variant");
            if (v == "V1") c.variant = CombinedVariant::v1;
            else if (v == "V2") c.variant = CombinedVariant::v2;
            else if (v == "V3") c.variant = CombinedVariant::v3;
            else throw std::invalid_argument("variant must be V1, V2 or V3, got " + v);
        }
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("patch_lr", c.patch_lr);
        get("epochs", c.epochs);
        get("tv_weight", c.tv_weight);
        get("transform", c.transform);
        get("latent_shift", c.latent_shift);
        get("latent_shift_alpha", c.latent_shift_alpha);
        get("seed", c.seed);
        get("gan_lr", c.gan_lr);
        get("v2_gan_weight", c.v2_gan_weight);
        get("v2_detector_weight", c.v2_detector_weight);
        get("patch_class", c.patch_class);
        get("gan_batch", c.gan_batch);
        get("checkpoint_every", c.checkpoint_every);
        get("proximity_radius", c.proximity_radius);
        if (j.contains("transform_config")) c.transform_config = transform_config_from_json(j.at("transform_config"));
        if (j.contains("placement")) c.placement = placement_from_json(j.at("placement"));
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("attack config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string metrics_header() {
    return "epoch,detector_loss,tv_loss,g_loss,d_loss,total_loss,mean_objectness_near,detections";
}

std::string metrics_row(const EpochRecord& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.epoch, r.detector_loss, r.tv_loss,
                  r.g_loss, r.d_loss, r.total_loss, r.mean_objectness_near, r.detections);
    return buf;
}

PatchSummary summarize_patch(const DetectorAdapter& detector, const std::vector<Tensor>& images,
                             const std::optional<Patch>& patch, const Placement& placement, double radius) {
    PatchSummary s;
    if (images.empty()) return s;
    for (const Tensor& image : images) {
        const Tensor input = patch ? apply_patch(image, *patch, placement) : image;
        const LossEvaluation ev = detector.evaluate(input, false);
        s.detector_loss += ev.loss;
        s.mean_objectness_near += mean_objectness_near(ev.candidates, placement, radius);
        s.detections += static_cast<double>(detector.postprocess(ev.candidates).size());
    }
    const double n = static_cast<double>(images.size());
    s.detector_loss /= n;
    s.mean_objectness_near /= n;
    s.detections /= n;
    return s;
}

namespace {

nlohmann::json to_json(const EpochRecord& r) {
    return {r.epoch, r.detector_loss, r.tv_loss, r.g_loss, r.d_loss, r.total_loss, r.mean_objectness_near, r.detections};
}

EpochRecord record_from_json(const nlohmann::json& j) {
    EpochRecord r;
    r.epoch = j.at(0);
    r.detector_loss = j.at(1);
    r.tv_loss = j.at(2);
    r.g_loss = j.at(3);
    r.d_loss = j.at(4);
    r.total_loss = j.at(5);
    r.mean_objectness_near = j.at(6);
    r.detections = j.at(7);
    return r;
}

nlohmann::json to_json(const PatchSummary& s) {
    return {{"detector_loss", s.detector_loss},
            {"mean_objectness_near", s.mean_objectness_near},
            {"detections", s.detections}};
}

PatchSummary summary_from_json(const nlohmann::json& j) {
    return PatchSummary{j.at("detector_loss"), j.at("mean_objectness_near"), j.at("detections")};
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::string resume_key(const AttackConfig& config) {
    nlohmann::json j = config.to_json();
    j.erase("epochs");
    return hex64(fnv1a64(j.dump()));
}

/// Mutable state shared by all drivers.
struct Context {
    const DetectorAdapter& detector;
    const std::vector<Tensor>& images;
    const AttackConfig& config;
    Rng shuffle_rng;
    Rng transform_rng;
    Rng gan_rng;
    std::optional<Patch> shift_mask;

    Context(const DetectorAdapter& d, const std::vector<Tensor>& imgs, const AttackConfig& c, std::size_t patch_h,
            std::size_t patch_w)
        : detector(d),
          images(imgs),
          config(c),
          shuffle_rng(Rng::derive(c.seed, "shuffle")),
          transform_rng(Rng::derive(c.seed, "transform")),
          gan_rng(Rng::derive(c.seed, "gan")) {
        if (c.latent_shift) {
            Rng mask_rng = Rng::derive(c.seed, "latent-shift");
            shift_mask = Patch::uniform(patch_h, patch_w, mask_rng);
        }
    }

    Patch effective(const Patch& base) const {
        return shift_mask ? latent_shift(base, *shift_mask, config.latent_shift_alpha) : base;
    }

    std::optional<TransformSample> next_sample(std::size_t h, std::size_t w) {
        if (!config.transform) return std::nullopt;
        return sample_transform(config.transform_config, h, w, transform_rng);
    }
};

struct Objective {
    double detector_loss = 0.0;
    double tv = 0.0;
    Tensor grad_base;      ///< d (detector + tv_weight * tv) / d base patch
    Tensor det_grad_base;  ///< d detector / d base patch
    double objectness_near = 0.0;
    double detections = 0.0;
};

Objective evaluate_objective(const Context& ctx, const Tensor& image, const Patch& base,
                             const std::optional<TransformSample>& sample) {
    const AttackConfig& cfg = ctx.config;
    const Patch shifted = ctx.effective(base);
    const Patch shown = sample ? apply_transform(shifted, *sample) : shifted;
    const Tensor composite = apply_patch(image, shown, cfg.placement);
    const LossEvaluation ev = ctx.detector.evaluate(composite, true);
    if (!std::isfinite(ev.loss)) {
        throw std::runtime_error("detector loss is not finite (" + std::to_string(ev.loss) + ")");
    }
    Tensor g = apply_patch_backward(ev.gradient, shown, cfg.placement);
    if (sample) g = apply_transform_backward(shifted, *sample, g);
    if (ctx.shift_mask) g = latent_shift_backward(base, *ctx.shift_mask, cfg.latent_shift_alpha, g);

    Objective o;
    o.detector_loss = ev.loss;
    o.det_grad_base = g;
    o.tv = total_variation(base);
    if (cfg.tv_weight != 0.0) {
        Tensor tg = total_variation_gradient(base);
        tg *= cfg.tv_weight;
        g += tg;
    }
    o.grad_base = std::move(g);
    o.objectness_near = mean_objectness_near(ev.candidates, cfg.placement, cfg.proximity_radius);
    o.detections = static_cast<double>(ctx.detector.postprocess(ev.candidates).size());
    return o;
}

struct StepStats {
    double detector_loss = 0.0;
    double tv = 0.0;
    double g_loss = 0.0;
    double d_loss = 0.0;
    double objectness_near = 0.0;
    double detections = 0.0;
};

StepStats stats_of(const Objective& o) {
    StepStats s;
    s.detector_loss = o.detector_loss;
    s.tv = o.tv;
    s.objectness_near = o.objectness_near;
    s.detections = o.detections;
    return s;
}

struct Hooks {
    std::function<StepStats(const Tensor& image)> step;
    std::function<Patch()> base_patch;
    std::function<std::optional<LatentVector>()> latent;
    std::function<void(Archive&)> save_state;
    std::function<void(const Archive&)> load_state;
    std::function<void(const fs::path& dir, std::size_t epoch)> save_extra;
    std::function<void(const fs::path& dir)> load_extra;
};

void write_latent(const fs::path& path, const LatentVector& z) {
    Archive a;
    a.meta["kind"] = "latent";
    a.meta["class_id"] = z.class_id;
    a.tensors["z"] = z.z;
    write_archive(path, a);
}

void write_metrics(const fs::path& path, const std::vector<EpochRecord>& history) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << metrics_header() << '\n';
    for (const auto& r : history) out << metrics_row(r) << '\n';
}

std::string epoch_tag(std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "e%06zu", epoch);
    return buf;
}

void validate_inputs(const std::vector<Tensor>& images, const AttackConfig& config) {
    config.validate();
    if (images.empty()) throw std::invalid_argument("attack needs at least one image");
    if (config.mode == AttackMode::per_instance && images.size() != 1) {
        throw std::invalid_argument("per-instance attacks take exactly one image, got " + std::to_string(images.size()));
    }
    for (const Tensor& img : images) {
        if (img.rank() != 3 || img.dim(0) != 3) {
            throw std::invalid_argument("attack images must be (3, H, W), got " + shape_string(img.shape()));
        }
        validate_placement(config.placement, img.dim(1), img.dim(2));
    }
}

AttackResult run_driver(Context& ctx, const RunOptions& run, Hooks& hooks) {
    const AttackConfig& cfg = ctx.config;
    const bool writing = !run.dir.empty();
    const fs::path state_path = run.dir / "state.nparc";
    const fs::path metrics_path = run.dir / "metrics.csv";
    const std::string config_hash = hex64(fnv1a64(cfg.to_json().dump()));

    AttackResult result;
    std::size_t start = 0;
    if (writing) fs::create_directories(run.dir / "checkpoints");

    if (writing && run.resume && fs::exists(state_path)) {
        const Archive a = read_archive(state_path);
        if (a.meta.value("resume_key", "") != resume_key(cfg)) {
            throw std::invalid_argument("cannot resume " + run.dir.string() + ": configuration differs from the saved run");
        }
        start = a.meta.at("epoch");
        ctx.shuffle_rng.load_state(a.meta.at("rng").at("shuffle"));
        ctx.transform_rng.load_state(a.meta.at("rng").at("transform"));
        ctx.gan_rng.load_state(a.meta.at("rng").at("gan"));
        for (const auto& r : a.meta.at("history")) result.trajectory.push_back(record_from_json(r));
        result.checkpoint_epochs = a.meta.at("checkpoint_epochs").get<std::vector<std::size_t>>();
        result.baseline = summary_from_json(a.meta.at("baseline"));
        hooks.load_state(a);
        if (hooks.load_extra) hooks.load_extra(run.dir);
        if (start > cfg.epochs) {
            throw std::invalid_argument("saved run is already at epoch " + std::to_string(start) + " > " +
                                        std::to_string(cfg.epochs));
        }
    } else {
        result.baseline = summarize_patch(ctx.detector, ctx.images, ctx.effective(hooks.base_patch()), cfg.placement,
                                          cfg.proximity_radius);
    }
    if (writing) write_metrics(metrics_path, result.trajectory);

    auto save_checkpoint = [&](std::size_t epoch) {
        result.checkpoint_epochs.push_back(epoch);
        if (!writing) return;
        const Patch current = ctx.effective(hooks.base_patch());
        PatchMetadata meta;
        meta.native_height = current.height();
        meta.native_width = current.width();
        meta.config_hash = config_hash;
        meta.seed = cfg.seed;
        meta.extra = {{"epoch", epoch}, {"source", to_string(cfg.source)}};
        if (cfg.patch_class >= 0) meta.extra["class_id"] = cfg.patch_class;
        const fs::path dir = run.dir / "checkpoints";
        save_patch(dir / ("patch_" + epoch_tag(epoch) + ".png"), current, meta);
        if (auto z = hooks.latent()) write_latent(dir / ("latent_" + epoch_tag(epoch) + ".nparc"), *z);

        Archive a;
        a.meta["kind"] = "attack_state";
        a.meta["epoch"] = epoch;
        a.meta["resume_key"] = resume_key(cfg);
        a.meta["config"] = cfg.to_json();
        a.meta["rng"] = {{"shuffle", ctx.shuffle_rng.save_state()},
                         {"transform", ctx.transform_rng.save_state()},
                         {"gan", ctx.gan_rng.save_state()}};
        a.meta["history"] = nlohmann::json::array();
        for (const auto& r : result.trajectory) a.meta["history"].push_back(to_json(r));
        a.meta["checkpoint_epochs"] = result.checkpoint_epochs;
        a.meta["baseline"] = to_json(result.baseline);
        hooks.save_state(a);
        if (hooks.save_extra) hooks.save_extra(run.dir, epoch);
        write_archive(state_path, a);
    };

    std::vector<std::size_t> order(ctx.images.size());
    for (std::size_t epoch = start + 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        if (cfg.mode == AttackMode::universal) ctx.shuffle_rng.shuffle(order);

        StepStats sum;
        for (std::size_t idx : order) {
            StepStats s;
            try {
                s = hooks.step(ctx.images[idx]);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("epoch " + std::to_string(epoch) + ", image " + std::to_string(idx) + ": " +
                                         e.what());
            }
            sum.detector_loss += s.detector_loss;
            sum.tv += s.tv;
            sum.g_loss += s.g_loss;
            sum.d_loss += s.d_loss;
            sum.objectness_near += s.objectness_near;
            sum.detections += s.detections;
        }
        const double n = static_cast<double>(order.size());
        EpochRecord r;
        r.epoch = epoch;
        r.detector_loss = sum.detector_loss / n;
        r.tv_loss = sum.tv / n;
        r.g_loss = sum.g_loss / n;
        r.d_loss = sum.d_loss / n;
        r.total_loss = r.detector_loss + cfg.tv_weight * r.tv_loss;
        r.mean_objectness_near = sum.objectness_near / n;
        r.detections = sum.detections / n;
        result.trajectory.push_back(r);
        if (writing) {
            std::ofstream out(metrics_path, std::ios::app);
            out << metrics_row(r) << '\n';
        }
        if (run.on_epoch) run.on_epoch(r);

        if (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) save_checkpoint(epoch);
        if (run.stop_after != 0 && epoch == run.stop_after && epoch < cfg.epochs) {
            result.completed = false;
            break;
        }
    }

    result.patch = ctx.effective(hooks.base_patch());
    result.latent = hooks.latent();
    result.final_summary =
        summarize_patch(ctx.detector, ctx.images, result.patch, cfg.placement, cfg.proximity_radius);

    if (writing && result.completed) {
        PatchMetadata meta;
        meta.native_height = result.patch.height();
        meta.native_width = result.patch.width();
        meta.config_hash = config_hash;
        meta.seed = cfg.seed;
        meta.extra = {{"epoch", cfg.epochs}, {"source", to_string(cfg.source)}};
        if (cfg.patch_class >= 0) meta.extra["class_id"] = cfg.patch_class;
        save_patch(run.dir / "patch.png", result.patch, meta);
        if (result.latent) write_latent(run.dir / "latent.nparc", *result.latent);
        nlohmann::json summary = {{"epochs", cfg.epochs},
                                  {"source", to_string(cfg.source)},
                                  {"mode", to_string(cfg.mode)},
                                  {"images", ctx.images.size()},
                                  {"checkpoint_epochs", result.checkpoint_epochs},
                                  {"baseline", to_json(result.baseline)},
                                  {"final", to_json(result.final_summary)}};
        std::ofstream(run.dir / "summary.json") << summary.dump(2) << '\n';
    }
    return result;
}

}  // namespace

AttackResult pgd_patch_attack(const DetectorAdapter& detector, const std::vector<Tensor>& images,
                              const AttackConfig& config, const RunOptions& run) {
    validate_inputs(images, config);
    if (config.source != PatchSource::pixel) throw std::invalid_argument("PGD attack needs source = pixel");
    if (!detector.supports_gradient()) {
        throw UnsupportedOperation("detector " + detector.name() + " does not provide gradients");
    }
    const std::size_t h = config.placement.height, w = config.placement.width;
    Context ctx(detector, images, config, h, w);
    Rng init = Rng::derive(config.seed, "patch-init");
    Patch patch = Patch::uniform(h, w, init);

    Hooks hooks;
    hooks.step = [&](const Tensor& image) {
        const auto sample = ctx.next_sample(h, w);
        const Objective o = evaluate_objective(ctx, image, patch, sample);
        for (std::size_t i = 0; i < patch.pixels.size(); ++i) {
            patch.pixels[i] -= config.patch_lr * sign(o.grad_base[i]);
        }
        patch.project();
        return stats_of(o);
    };
    hooks.base_patch = [&] { return patch; };
    hooks.latent = [] { return std::optional<LatentVector>{}; };
    hooks.save_state = [&](Archive& a) { a.tensors["patch"] = patch.pixels; };
    hooks.load_state = [&](const Archive& a) { patch = Patch(a.tensor("patch")); };
    return run_driver(ctx, run, hooks);
}

namespace {

/// Latent parameterization shared by the frozen and combined drivers.
struct LatentState {
    LatentVector z;

    void descend(const Tensor& grad, double lr) {
        for (std::size_t i = 0; i < z.z.size(); ++i) z.z[i] -= lr * grad[i];
    }
};

void bind_latent(Hooks& hooks, LatentState& st, const GeneratorHandle& generator) {
    hooks.base_patch = [&st, &generator] { return generator.generate(st.z); };
    hooks.latent = [&st] { return std::optional<LatentVector>(st.z); };
    hooks.save_state = [&st](Archive& a) {
        a.tensors["z"] = st.z.z;
        a.meta["class_id"] = st.z.class_id;
    };
    hooks.load_state = [&st](const Archive& a) {
        st.z.z = a.tensor("z");
        st.z.class_id = a.meta.at("class_id");
    };
}

void check_patch_class(const GeneratorArch& arch, int patch_class) {
    if (arch.conditional()) {
        if (patch_class < 0 || static_cast<std::size_t>(patch_class) >= arch.num_classes) {
            throw std::invalid_argument("conditional generator needs patch_class in [0, " +
                                        std::to_string(arch.num_classes) + ")");
        }
    } else if (patch_class >= 0) {
        throw std::invalid_argument("patch_class given for an unconditional generator");
    }
}

}  // namespace

AttackResult pretrained_gan_attack(const DetectorAdapter& detector, const GeneratorHandle& generator,
                                   const std::vector<Tensor>& images, const AttackConfig& config,
                                   const RunOptions& run) {
    if (generator.trainable()) {
        throw std::logic_error("contract violation: pretrained_gan_attack requires a frozen generator");
    }
    validate_inputs(images, config);
    if (config.source != PatchSource::frozen_generator) {
        throw std::invalid_argument("pretrained generator attack needs source = frozen_generator");
    }
    if (!detector.supports_gradient()) {
        throw UnsupportedOperation("detector " + detector.name() + " does not provide gradients");
    }
    check_patch_class(generator.arch(), config.patch_class);
    const std::size_t s = generator.resolution();
    Context ctx(detector, images, config, s, s);
    Rng init = Rng::derive(config.seed, "latent-init");
    LatentState st{sample_latent(generator.arch(), init, config.patch_class)};

    Hooks hooks;
    bind_latent(hooks, st, generator);
    hooks.step = [&](const Tensor& image) {
        const auto sample = ctx.next_sample(s, s);
        const GeneratorTrace trace = generator.generate_traced(st.z);
        const Objective o = evaluate_objective(ctx, image, trace.patch, sample);
        st.descend(generator.backward(trace, o.grad_base, nullptr), config.patch_lr);
        return stats_of(o);
    };
    return run_driver(ctx, run, hooks);
}

Tensor sample_corpus_batch(const GanCorpus& corpus, std::size_t batch, std::size_t size, Rng& rng,
                           std::vector<int>* labels) {
    if (corpus.images.empty()) throw std::invalid_argument("GAN corpus is empty");
    Tensor out({batch, 3, size, size});
    if (labels) labels->clear();
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t idx = rng.index(corpus.images.size());
        const Tensor& img = corpus.images[idx];
        out.set_slice(b, img.dim(1) == size && img.dim(2) == size ? img : resize_bilinear(img, size, size));
        if (labels && !corpus.labels.empty()) labels->push_back(corpus.labels[idx]);
    }
    return out;
}

AttackResult combined_patch_gan_attack(const DetectorAdapter& detector, GanTrainState& gan, const GanCorpus& flowers,
                                       const std::vector<Tensor>& images, const AttackConfig& config,
                                       const RunOptions& run) {
    validate_inputs(images, config);
    if (config.source != PatchSource::trained_generator) {
        throw std::invalid_argument("combined patch-GAN attack needs source = trained_generator");
    }
    if (!gan.generator.trainable()) throw std::invalid_argument("combined training needs a trainable generator");
    if (!detector.supports_gradient()) {
        throw UnsupportedOperation("detector " + detector.name() + " does not provide gradients");
    }
    if (flowers.images.empty()) throw std::invalid_argument("combined training needs a non-empty GAN corpus");
    const GeneratorArch& arch = gan.generator.arch();
    if (arch.conditional() && flowers.labels.size() != flowers.images.size()) {
        throw std::invalid_argument("conditional GAN corpus needs one label per image");
    }
    check_patch_class(arch, config.patch_class);
    const std::size_t s = arch.output_size();
    Context ctx(detector, images, config, s, s);
    Rng init = Rng::derive(config.seed, "latent-init");
    LatentState st{sample_latent(arch, init, config.patch_class)};
    gan.g_opt.set_lr(config.gan_lr);
    gan.d_opt.set_lr(config.gan_lr);

    const GeneratorHandle& generator = gan.generator;
    Hooks hooks;
    bind_latent(hooks, st, generator);
    hooks.step = [&](const Tensor& image) {
        std::vector<int> labels;
        const Tensor real = sample_corpus_batch(flowers, config.gan_batch, s, ctx.gan_rng,
                                                arch.conditional() ? &labels : nullptr);
        GanLosses gl;
        std::optional<GanDiscriminatorStep> deferred;
        if (config.variant == CombinedVariant::v3) {
            deferred = gan_discriminator_update(gan, real, ctx.gan_rng, labels);
            gl.d_loss = deferred->d_loss;
        } else {
            gl = gan_train_step(gan, real, ctx.gan_rng, labels);
        }

        // Patch-noise update through the current generator.
        const auto sample = ctx.next_sample(s, s);
        const GeneratorTrace trace = generator.generate_traced(st.z);
        const Objective o = evaluate_objective(ctx, image, trace.patch, sample);
        st.descend(generator.backward(trace, o.grad_base, nullptr), config.patch_lr);

        if (config.variant != CombinedVariant::v1) {
            const GeneratorTrace t2 = generator.generate_traced(st.z);
            const Objective o2 = evaluate_objective(ctx, image, t2.patch, sample);
            Tensor grad_patch = o2.det_grad_base;
            grad_patch *= config.v2_detector_weight;
            if (config.variant == CombinedVariant::v2) {
                PatchRealism realism = patch_realism_loss(gan.discriminator, t2.patch, config.patch_class);
                realism.grad_patch *= config.v2_gan_weight;
                grad_patch += realism.grad_patch;
            }
            auto grads = generator.network().zero_gradients();
            generator.backward(t2, grad_patch, &grads);
            if (config.variant == CombinedVariant::v2) {
                gan.g_opt.step(gan.generator.mutable_network().parameters(), grads);
            } else {
                gl.g_loss = gan_generator_update(gan, *deferred, &grads);
                record_gan_losses(gan, gl);
            }
        }
        StepStats stats = stats_of(o);
        stats.g_loss = gl.g_loss;
        stats.d_loss = gl.d_loss;
        return stats;
    };
    hooks.save_extra = [&](const fs::path& dir, std::size_t epoch) {
        gan.epoch = epoch;
        save_gan_state(dir / "gan_state.nparc", gan);
        save_generator(dir / "checkpoints" / ("generator_" + epoch_tag(epoch) + ".nparc"), gan.generator);
    };
    hooks.load_extra = [&](const fs::path& dir) { gan = load_gan_state(dir / "gan_state.nparc"); };
    AttackResult result = run_driver(ctx, run, hooks);
    if (!run.dir.empty() && result.completed) save_generator(run.dir / "generator.nparc", gan.generator);
    return result;
}

AttackResult universal_train(const AttackOp& op, const std::vector<Tensor>& dataset, AttackConfig config) {
    if (dataset.empty()) throw std::invalid_argument("universal training needs a non-empty dataset");
    config.mode = AttackMode::universal;
    return op(dataset, config);
}

}  // namespace natpatch
