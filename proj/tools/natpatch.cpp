#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "experiment.hpp"
#include "natpatch/eval.hpp"
#include "natpatch/image_io.hpp"

using namespace natpatch;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string output;
    std::optional<long long> seed;

    nlohmann::json resolve() const {
        std::vector<std::string> all = overrides;
        if (!output.empty()) all.push_back("output_dir=" + nlohmann::json(output).dump());
        if (seed) all.push_back("seed=" + std::to_string(*seed));
        nlohmann::json c = cli::resolve_config(config_file, all);
        cli::validate_config(c);
        return c;
    }
};

void add_common(CLI::App* cmd, Common& common) {
    cmd->add_option("-c,--config", common.config_file, "JSON experiment config")->check(CLI::ExistingFile);
    cmd->add_option("--set", common.overrides, "Override a config key, e.g. attack.epochs=50 (repeatable)");
    cmd->add_option("-o,--output", common.output, "Output directory (overrides output_dir)");
    cmd->add_option("--seed", common.seed, "Run seed (overrides seed)");
}

void emit(const std::string& line) {
    std::cout << line << std::endl;
}

std::string tag(const char* prefix, std::size_t n) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%06zu", prefix, n);
    return buf;
}

// prepare-data -------------------------------------------------------------

DetectionDataset relative_to(DetectionDataset d, const fs::path& from, const fs::path& to) {
    for (auto& im : d.images) im.file_name = fs::relative(fs::absolute(from / im.file_name), fs::absolute(to)).generic_string();
    d.image_root = to;
    return d;
}

int cmd_prepare_data(const nlohmann::json& c) {
    const fs::path out = cli::output_directory(c, "prepare-data");
    fs::create_directories(out);
    cli::write_json(out / "config.json", c);
    const auto& d = c["dataset"];

    DetectionDataset merged;
    FilterCounts counts;
    if (d["kind"] == "synthetic") {
        std::vector<DetectionDataset> parts;
        for (const std::string split : {"train", "test"}) {
            SyntheticSpec spec;
            spec.images = split == "train" ? d["images"].get<std::size_t>() : d["test_images"].get<std::size_t>();
            spec.shapes_per_image = d["shapes_per_image"];
            spec.height = d["height"];
            spec.width = d["width"];
            spec.min_shape = d["min_shape"];
            spec.max_shape = d["max_shape"];
            spec.split = split;
            Rng rng = Rng::derive(d["seed"], "synthetic-" + split);
            const SyntheticDataset syn = make_synthetic_dataset(spec, rng);
            write_synthetic_dataset(out / split, syn);
            parts.push_back(relative_to(syn.dataset, out / split, out));
        }
        // Ids restart in each part; offset the test side.
        long long offset = 0;
        for (const auto& im : parts[0].images) offset = std::max(offset, im.id + 1);
        long long ann_offset = 0;
        for (const auto& a : parts[0].annotations) ann_offset = std::max(ann_offset, a.id + 1);
        for (auto& im : parts[1].images) im.id += offset;
        for (auto& a : parts[1].annotations) {
            a.image_id += offset;
            a.id += ann_offset;
        }
        merged = merge_datasets(parts);
        counts.images_before = counts.images_after = merged.images.size();
        counts.annotations_before = counts.annotations_after = merged.annotations.size();
    } else {
        if (d["sources"].empty()) throw std::invalid_argument("dataset.sources lists no COCO annotation files");
        std::vector<DetectionDataset> parts;
        for (const auto& s : d["sources"]) {
            for (const auto& [key, v] : s.items()) {
                if (key != "annotations" && key != "image_root" && key != "split") {
                    throw std::invalid_argument("unknown config key: dataset.sources[]." + key);
                }
            }
            const fs::path ann = s.at("annotations").get<std::string>();
            const fs::path root = s.value("image_root", ann.parent_path().string());
            if (!fs::exists(ann)) throw std::runtime_error("annotation file " + ann.string() + " does not exist");
            parts.push_back(relative_to(load_coco(ann, root, s.value("split", "")), root, out));
        }
        merged = merge_datasets(parts);
        const auto wanted = d["classes"].get<std::set<std::string>>();
        if (!wanted.empty()) merged = filter_by_classes(merged, wanted, &counts);
        else {
            counts.images_before = counts.images_after = merged.images.size();
            counts.annotations_before = counts.annotations_after = merged.annotations.size();
        }
    }
    merged.validate();
    const auto [train, test] = split_dataset(merged);
    write_coco(out / "train.json", train);
    write_coco(out / "test.json", test);
    const nlohmann::json summary{{"train", dataset_summary(train)},
                                 {"test", dataset_summary(test)},
                                 {"filter",
                                  {{"images_before", counts.images_before},
                                   {"images_after", counts.images_after},
                                   {"annotations_before", counts.annotations_before},
                                   {"annotations_after", counts.annotations_after}}}};
    cli::write_json(out / "summary.json", summary);
    emit(cli::progress_line("prepared", {{"train_images", static_cast<double>(train.images.size())},
                                         {"test_images", static_cast<double>(test.images.size())},
                                         {"train_annotations", static_cast<double>(train.annotations.size())},
                                         {"test_annotations", static_cast<double>(test.annotations.size())}}));
    emit("train_manifest=" + (out / "train.json").string());
    emit("test_manifest=" + (out / "test.json").string());
    return 0;
}

// train-gan ----------------------------------------------------------------

int cmd_train_gan(const nlohmann::json& c, bool resume) {
    const fs::path out = cli::output_directory(c, "train-gan");
    const GeneratorArch arch = cli::generator_arch(c);
    const auto& g = c["gan"];
    const std::size_t steps = g["steps"], batch = g["batch"], every = g["checkpoint_every"];
    const std::uint64_t seed = c["seed"];
    if (steps == 0) throw std::invalid_argument("gan.steps must be positive");
    if (every == 0) throw std::invalid_argument("gan.checkpoint_every must be positive");

    std::vector<std::string> warnings;
    const GanCorpus corpus = cli::load_gan_corpus(c, arch.output_size(), &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    if (corpus.images.empty()) throw std::runtime_error("GAN corpus is empty");

    fs::create_directories(out / "checkpoints");
    cli::write_json(out / "config.json", c);

    const nn::AdamOptions opts{g["lr"], g["beta1"], g["beta2"]};
    Rng rng = Rng::derive(seed, "gan");
    std::optional<GanTrainState> state;
    if (resume && fs::exists(out / "gan_state.nparc")) {
        state.emplace(load_gan_state(out / "gan_state.nparc"));
        if (!(state->generator.arch() == arch)) throw std::invalid_argument("resumed GAN state has a different architecture");
        std::ifstream in(out / "gan_rng.txt");
        std::stringstream ss;
        ss << in.rdbuf();
        rng.load_state(ss.str());
        emit(cli::progress_line("resume", {{"step", static_cast<double>(state->steps)}}));
    } else {
        state.emplace(GanTrainState::create(arch, opts, seed));
    }

    Rng grid_rng = Rng::derive(seed, "grid");
    std::vector<LatentVector> grid_z;
    const std::size_t samples = g["grid_samples"];
    for (std::size_t i = 0; i < samples; ++i) {
        grid_z.push_back(sample_latent(arch, grid_rng, arch.conditional() ? static_cast<int>(i % arch.num_classes) : -1));
    }
    const std::size_t columns = g["grid_columns"];
    const std::size_t log_every = std::max<std::size_t>(1, steps / 100);

    auto write_losses = [&] {
        std::ofstream csv(out / "losses.csv");
        csv << "step,d_loss,g_loss\n";
        char buf[96];
        for (std::size_t i = 0; i < state->history.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", i + 1, state->history[i].d_loss, state->history[i].g_loss);
            csv << buf;
        }
    };

    for (std::size_t step = state->steps + 1; step <= steps; ++step) {
        std::vector<int> labels;
        const Tensor real = sample_corpus_batch(corpus, batch, arch.output_size(), rng, arch.conditional() ? &labels : nullptr);
        const GanLosses l = gan_train_step(*state, real, rng, labels);
        if (step % log_every == 0 || step == steps) {
            emit(cli::progress_line("gan_step", {{"step", static_cast<double>(step)}, {"d_loss", l.d_loss}, {"g_loss", l.g_loss}}));
        }
        if (step % every == 0 || step == steps) {
            save_generator(out / "checkpoints" / (tag("generator_s", step) + ".nparc"), state->generator);
            save_png(out / "checkpoints" / (tag("grid_s", step) + ".png"), sample_grid(state->generator, grid_z, columns));
            save_gan_state(out / "gan_state.nparc", *state);
            std::ofstream(out / "gan_rng.txt") << rng.save_state();
            write_losses();
        }
    }
    save_generator(out / "generator.nparc", state->generator);
    save_png(out / "grid.png", sample_grid(state->generator, grid_z, columns));
    write_losses();
    emit("generator=" + (out / "generator.nparc").string());
    return 0;
}

// train-patch --------------------------------------------------------------

int cmd_train_patch(const nlohmann::json& c, bool resume, std::size_t stop_after) {
    const fs::path out = cli::output_directory(c, "train-patch");
    AttackConfig config = cli::attack_config(c);
    const auto detector = cli::make_detector(c);
    const cli::LoadedDataset data = cli::load_split(c, "train", *detector);
    if (data.samples.empty()) throw std::invalid_argument("training split has no images");
    std::vector<Tensor> images;
    for (const auto& s : data.samples) images.push_back(s.image);

    std::optional<GeneratorHandle> frozen;
    std::optional<GanTrainState> gan;
    GanCorpus corpus;
    if (config.source == PatchSource::frozen_generator) {
        const std::string w = c["generator"]["weights"];
        if (w.empty()) throw std::invalid_argument("generator.weights is required for source frozen_generator");
        frozen.emplace(load_pretrained({w, cli::generator_arch(c)}));
    } else if (config.source == PatchSource::trained_generator) {
        const std::string w = c["generator"]["weights"];
        if (!w.empty()) gan.emplace(load_gan_state(w));
        else gan.emplace(GanTrainState::create(cli::generator_arch(c), nn::AdamOptions{config.gan_lr, c["gan"]["beta1"], c["gan"]["beta2"]}, config.seed));
        std::vector<std::string> warnings;
        corpus = cli::load_gan_corpus(c, gan->generator.resolution(), &warnings);
        for (const auto& w2 : warnings) std::cerr << "warning: " << w2 << "\n";
    }

    fs::create_directories(out);
    cli::write_json(out / "config.json", c);

    auto run_one = [&](const std::vector<Tensor>& imgs, const fs::path& dir) {
        RunOptions run;
        run.dir = dir;
        run.resume = resume;
        run.stop_after = stop_after;
        run.on_epoch = [](const EpochRecord& r) {
            emit(cli::progress_line("epoch", {{"epoch", static_cast<double>(r.epoch)},
                                              {"detector_loss", r.detector_loss},
                                              {"tv_loss", r.tv_loss},
                                              {"g_loss", r.g_loss},
                                              {"d_loss", r.d_loss},
                                              {"total_loss", r.total_loss},
                                              {"mean_objectness_near", r.mean_objectness_near},
                                              {"detections", r.detections}}));
        };
        switch (config.source) {
            case PatchSource::pixel:
                return pgd_patch_attack(*detector, imgs, config, run);
            case PatchSource::frozen_generator:
                return pretrained_gan_attack(*detector, *frozen, imgs, config, run);
            case PatchSource::trained_generator:
                return combined_patch_gan_attack(*detector, *gan, corpus, imgs, config, run);
        }
        throw std::logic_error("unhandled patch source");
    };

    auto report = [](const AttackResult& r, long long image_id) {
        emit(cli::progress_line(r.completed ? "done" : "stopped",
                                {{"image_id", static_cast<double>(image_id)},
                                 {"epochs", static_cast<double>(r.trajectory.size())},
                                 {"baseline_objectness_near", r.baseline.mean_objectness_near},
                                 {"final_objectness_near", r.final_summary.mean_objectness_near},
                                 {"baseline_detections", r.baseline.detections},
                                 {"final_detections", r.final_summary.detections}}));
    };

    if (config.mode == AttackMode::universal) {
        report(run_one(images, out), -1);
    } else {
        for (std::size_t i = 0; i < images.size(); ++i) {
            report(run_one({images[i]}, out / "instances" / std::to_string(data.samples[i].image_id)),
                   data.samples[i].image_id);
        }
    }
    return 0;
}

// eval ---------------------------------------------------------------------

std::vector<ImagePredictions> detect_all(const DetectorAdapter& det, const std::vector<Tensor>& images,
                                         const std::vector<long long>& ids, const std::set<int>& keep,
                                         std::size_t threads) {
    std::vector<ImagePredictions> out(images.size());
    cli::parallel_for(images.size(), threads, [&](std::size_t i) {
        out[i].image_id = ids[i];
        for (const Detection& d : det.detect(images[i])) {
            if (keep.contains(d.class_id)) out[i].detections.push_back(d);
        }
    });
    return out;
}

int cmd_eval(const nlohmann::json& c, const std::string& patch_arg, const std::string& run_arg) {
    const fs::path out = cli::output_directory(c, "eval");
    const AttackConfig attack = cli::attack_config(c);
    fs::path patch_path = patch_arg.empty() ? fs::path(c["eval"]["patch"].get<std::string>()) : fs::path(patch_arg);
    if (!run_arg.empty()) patch_path = fs::path(run_arg) / "patch.png";
    if (!patch_path.empty() && !fs::exists(patch_path)) throw std::runtime_error("patch " + patch_path.string() + " does not exist");

    const auto detector = cli::make_detector(c);
    const cli::LoadedDataset data = cli::load_split(c, "test", *detector);
    if (data.samples.empty()) throw std::invalid_argument("test split has no images");

    const auto& names = detector->class_names();
    std::vector<int> class_set;
    for (const std::string& n : data.dataset.class_names()) {
        const auto it = std::find(names.begin(), names.end(), n);
        class_set.push_back(static_cast<int>(it - names.begin()));
    }
    std::sort(class_set.begin(), class_set.end());
    const std::set<int> keep(class_set.begin(), class_set.end());
    std::vector<long long> category_ids(names.size(), 0);
    for (std::size_t k = 0; k < data.dataset.categories.size(); ++k) {
        const auto it = std::find(names.begin(), names.end(), data.dataset.categories[k].name);
        category_ids[static_cast<std::size_t>(it - names.begin())] = data.dataset.categories[k].id;
    }

    std::vector<Tensor> clean_images;
    std::vector<long long> ids;
    std::vector<ImageGroundTruth> gt;
    for (const auto& s : data.samples) {
        clean_images.push_back(s.image);
        ids.push_back(s.image_id);
        gt.push_back({s.image_id, s.labels});
    }
    const std::size_t threads = c["eval"]["threads"];
    const MatchProtocol protocol{c["eval"]["iou_threshold"]};

    fs::create_directories(out);
    cli::write_json(out / "config.json", c);

    struct Variant {
        std::string name;
        std::vector<Tensor> images;
        std::optional<Placement> placement;
    };
    std::vector<Variant> variants{{"clean", clean_images, std::nullopt}};
    if (!patch_path.empty()) {
        const Patch patch = load_patch(patch_path);
        Variant attacked{"attacked", {}, attack.placement};
        for (const auto& img : clean_images) attacked.images.push_back(apply_patch(img, patch, attack.placement));
        variants.push_back(std::move(attacked));
        if (c["eval"]["black_baseline"].get<bool>()) {
            const Patch black = Patch::filled(attack.placement.height, attack.placement.width, 0.0);
            Variant b{"black", {}, attack.placement};
            for (const auto& img : clean_images) b.images.push_back(apply_patch(img, black, attack.placement));
            variants.push_back(std::move(b));
        }
    }

    std::vector<EvalReport> reports;
    const std::size_t renders = c["eval"]["render"];
    for (const Variant& v : variants) {
        const auto preds = detect_all(*detector, v.images, ids, keep, threads);
        EvalReport r = make_report(v.name, preds, gt, names, class_set, protocol);
        if (v.placement) r.proximity = proximity_report(reports.front().detections, preds, *v.placement, attack.proximity_radius);
        cli::write_json(out / (v.name + ".json"), r.to_json());
        std::vector<std::pair<long long, std::vector<Detection>>> per_image;
        for (const auto& p : preds) per_image.emplace_back(p.image_id, p.detections);
        cli::write_json(out / ("detections_" + v.name + ".json"), to_coco_results(per_image, category_ids));
        for (std::size_t i = 0; i < std::min(renders, v.images.size()); ++i) {
            fs::create_directories(out / "renders");
            save_png(out / "renders" / (v.name + "_" + std::to_string(ids[i]) + ".png"),
                     render_annotated(v.images[i], preds[i].detections, names, v.placement));
        }
        std::vector<std::pair<std::string, double>> fields{{"mAP", 100.0 * r.map}};
        if (r.proximity) {
            fields.emplace_back("near", static_cast<double>(r.proximity->near));
            fields.emplace_back("suppressed", static_cast<double>(r.proximity->suppressed));
            fields.emplace_back("mean_confidence_delta", r.proximity->mean_confidence_delta);
        }
        emit(cli::progress_line("report_" + v.name, fields));
        reports.push_back(std::move(r));
    }
    std::ofstream(out / "comparison.csv") << comparison_table_csv(reports);
    return 0;
}

// render -------------------------------------------------------------------

int cmd_render(const nlohmann::json& c, const std::vector<std::string>& inputs, const std::string& patch_arg) {
    const fs::path out = cli::output_directory(c, "render");
    const AttackConfig attack = cli::attack_config(c);
    const fs::path patch_path = patch_arg.empty() ? fs::path(c["eval"]["patch"].get<std::string>()) : fs::path(patch_arg);
    std::optional<Patch> patch;
    if (!patch_path.empty()) {
        if (!fs::exists(patch_path)) throw std::runtime_error("patch " + patch_path.string() + " does not exist");
        patch = load_patch(patch_path);
    }
    const auto detector = cli::make_detector(c);
    fs::create_directories(out);
    for (const std::string& in : inputs) {
        Tensor image = load_image(in);
        std::optional<Placement> placement;
        if (patch) {
            image = apply_patch(image, *patch, attack.placement);
            placement = attack.placement;
        }
        const auto dets = detector->detect(image);
        const fs::path target = out / (fs::path(in).stem().string() + ".png");
        save_png(target, render_annotated(image, dets, detector->class_names(), placement));
        emit(cli::progress_line("rendered", {{"detections", static_cast<double>(dets.size())}}) + " file=" + target.string());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Naturalistic adversarial patches against object detectors"};
    app.require_subcommand(1);

    Common common;
    auto* prep = app.add_subcommand("prepare-data", "Build filtered train/test manifests");
    add_common(prep, common);

    auto* gan = app.add_subcommand("train-gan", "Train a DCGAN on a patch corpus");
    add_common(gan, common);
    bool resume = false;
    gan->add_flag("--resume", resume, "Continue from the state in the output directory");

    auto* train = app.add_subcommand("train-patch", "Optimize an adversarial patch");
    add_common(train, common);
    train->add_flag("--resume", resume, "Continue from the checkpoint in the output directory");
    std::size_t stop_after = 0;
    train->add_option("--stop-after", stop_after, "Stop after this epoch without final outputs");

    auto* eval = app.add_subcommand("eval", "Clean, attacked and black-square evaluation");
    add_common(eval, common);
    std::string patch_arg, run_arg;
    eval->add_option("--patch", patch_arg, "Patch PNG (overrides eval.patch)");
    eval->add_option("--run", run_arg, "train-patch run directory; uses its patch.png");

    auto* render = app.add_subcommand("render", "Draw detections on images");
    add_common(render, common);
    std::vector<std::string> inputs;
    render->add_option("images", inputs, "Images to annotate")->required()->check(CLI::ExistingFile);
    render->add_option("--patch", patch_arg, "Patch PNG composited at attack.placement");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const nlohmann::json c = common.resolve();
        if (*prep) return cmd_prepare_data(c);
        if (*gan) return cmd_train_gan(c, resume);
        if (*train) return cmd_train_patch(c, resume, stop_after);
        if (*eval) return cmd_eval(c, patch_arg, run_arg);
        if (*render) return cmd_render(c, inputs, patch_arg);
    } catch (const std::logic_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
