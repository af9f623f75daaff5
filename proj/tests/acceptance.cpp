#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "natpatch/attacks.hpp"
#include "natpatch/data.hpp"
#include "natpatch/eval.hpp"
#include "natpatch/mock_detector.hpp"
#include "oracles.hpp"

using namespace natpatch;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, double limit_s, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = limit_s <= 0 || secs < limit_s;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    char timing[96];
    if (limit_s > 0) std::snprintf(timing, sizeof(timing), "%.1f s (limit %.0f s)", secs, limit_s);
    else std::snprintf(timing, sizeof(timing), "%.1f s", secs);
    std::printf("%s criterion %d: %s; %s; %s\n", pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str(), timing);
    std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), f, a);
    return buf;
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-6}); }

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = rng.uniform();
    return t;
}

// 1 -------------------------------------------------------------------------

Outcome gradient_correctness() {
    Rng rng(101);
    double worst_tv = 0, worst_det = 0;
    std::size_t skipped = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Patch p(random_tensor({3, 8, 8}, rng));
        const Tensor g = total_variation_gradient(p);
        const double h = 1e-4;
        // TV is not differentiable where neighbours tie; a difference within
        // the step would put the stencil across the kink.
        auto near_kink = [&](std::size_t i) {
            const std::size_t c = i / 64, y = (i / 8) % 8, x = i % 8;
            const double v = p.pixels.at(c, y, x);
            auto close = [&](std::size_t yy, std::size_t xx) { return std::abs(p.pixels.at(c, yy, xx) - v) < 2 * h; };
            return (y > 0 && close(y - 1, x)) || (y < 7 && close(y + 1, x)) || (x > 0 && close(y, x - 1)) ||
                   (x < 7 && close(y, x + 1));
        };
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (near_kink(i)) {
                ++skipped;
                continue;
            }
            Patch up = p, down = p;
            up.pixels[i] = std::min(1.0, p.pixels[i] + h);
            down.pixels[i] = std::max(0.0, p.pixels[i] - h);
            const double fd = (total_variation(up) - total_variation(down)) / (up.pixels[i] - down.pixels[i]);
            worst_tv = std::max(worst_tv, rel_err(g[i], fd));
        }
    }
    const MockDetector det = MockDetector::random(MockDetectorConfig{}, 102);
    for (int trial = 0; trial < 100; ++trial) {
        // Half the inputs go through a non-trivial letterbox.
        const Tensor image = trial % 2 ? random_tensor({3, 64, 64}, rng) : random_tensor({3, 48, 80}, rng);
        const Tensor g = det.image_gradient(image);
        for (int k = 0; k < 8; ++k) {
            const std::size_t i = rng.index(image.size());
            Tensor up = image, down = image;
            const double h = 1e-4;
            up[i] += h;
            down[i] -= h;
            const double fd = (det.vanish_loss(up) - det.vanish_loss(down)) / (2 * h);
            worst_det = std::max(worst_det, rel_err(g[i], fd));
        }
    }
    const double worst = std::max(worst_tv, worst_det);
    return {worst < 1e-3, fmt("max relative error TV %.2e", worst_tv) + " (" + std::to_string(skipped) + " of 19200 coordinates at a tie skipped)" + fmt(", mock detector %.2e (< 1e-3)", worst_det)};
}

// 2 -------------------------------------------------------------------------

Outcome pgd_step_oracle() {
    const std::size_t size = 32;
    const oracles::QuadraticDetector det(size, Placement{0, 0, size, size});
    Rng rng(201);
    const std::vector<Tensor> images{random_tensor({3, size, size}, rng)};
    AttackConfig cfg;
    cfg.placement = Placement{8, 8, 16, 16};
    cfg.tv_weight = 0.0;
    cfg.patch_lr = 0.013;
    cfg.seed = 5;
    cfg.checkpoint_every = 1000;

    // Closed form: d/dp sum x^2 = 2p inside the patch, so each step is
    // p <- clamp(p - lr * sign(p)).
    Rng init = Rng::derive(cfg.seed, "patch-init");
    Tensor expected = Patch::uniform(16, 16, init).pixels;
    double worst = 0;
    const std::size_t steps = 40;
    for (std::size_t k = 1; k <= steps; ++k) {
        for (double& v : expected.values()) {
            const double s = v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
            v = std::clamp(v - cfg.patch_lr * s, 0.0, 1.0);
        }
        cfg.epochs = k;
        const AttackResult r = pgd_patch_attack(det, images, cfg);
        for (std::size_t i = 0; i < expected.size(); ++i) worst = std::max(worst, std::abs(r.patch.pixels[i] - expected[i]));
    }
    return {worst <= 1e-7, std::to_string(steps) + " steps x 768 pixels" + fmt(", max deviation %.1e (<= 1e-7)", worst)};
}

// 3 -------------------------------------------------------------------------

Outcome ap_oracle() {
    Rng rng(301);
    double worst = 0;
    std::size_t classes_checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const oracles::Instance in = oracles::random_instance(rng);
        const auto ap = average_precision(in.preds, in.gt, MatchProtocol{0.5}, std::vector<int>{0, 1, 2});
        for (int c = 0; c < 3; ++c) {
            worst = std::max(worst, std::abs(ap.at(c).ap - oracles::brute_force_ap(in, c, 0.5)));
            ++classes_checked;
        }
    }
    return {worst <= 1e-9, "1000 instances, " + std::to_string(classes_checked) + " class curves" +
                               fmt(", max |AP - oracle| %.1e (<= 1e-9)", worst)};
}

// 4 -------------------------------------------------------------------------

Outcome compositing_invariants() {
    Rng rng(401);
    std::size_t identity_violations = 0, range_violations = 0;
    const TransformConfig tc;
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t h = 8 + rng.index(41), w = 8 + rng.index(41);
        const Tensor image = random_tensor({3, h, w}, rng);
        const std::size_t ph = 1 + rng.index(h), pw = 1 + rng.index(w);
        const Placement pl{rng.index(w - pw + 1), rng.index(h - ph + 1), ph, pw};
        const std::size_t nh = 1 + rng.index(24), nw = 1 + rng.index(24);
        const Patch patch = transform_patch(Patch(random_tensor({3, nh, nw}, rng)), tc, rng);
        if (patch.pixels.min() < 0.0 || patch.pixels.max() > 1.0) ++range_violations;
        const Tensor out = apply_patch(image, patch, pl);
        if (out.min() < 0.0 || out.max() > 1.0) ++range_violations;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const bool inside = y >= pl.y && y < pl.y + pl.height && x >= pl.x && x < pl.x + pl.width;
                    if (!inside && out.at(c, y, x) != image.at(c, y, x)) ++identity_violations;
                }
    }
    return {identity_violations == 0 && range_violations == 0,
            "10000 calls, " + std::to_string(identity_violations) + " outside-mask and " + std::to_string(range_violations) +
                " range violations"};
}

// 5, 6, 8 -------------------------------------------------------------------

struct DeskFixture {
    MockDetector detector = MockDetector::shape_detector();
    std::vector<Tensor> images;
    std::optional<GeneratorHandle> generator;
    AttackConfig config;
};

DeskFixture& desk_fixture() {
    static std::optional<DeskFixture> f;
    if (f) return *f;
    f.emplace();
    Rng drng(7);
    f->images = make_synthetic_dataset(SyntheticSpec{}, drng).images;

    GeneratorArch arch;
    arch.latent_dim = 16;
    arch.base_channels = 16;
    arch.upsample_blocks = 2;
    GanTrainState gan = GanTrainState::create(arch, nn::AdamOptions{}, 3);
    Rng crng(11);
    GanCorpus corpus;
    corpus.images = make_flower_corpus(64, 16, crng);
    Rng grng(5);
    for (int step = 0; step < 1000; ++step) {
        const Tensor real = sample_corpus_batch(corpus, 16, 16, grng);
        gan_train_step(gan, real, grng);
    }
    f->generator.emplace(gan.generator);
    f->generator->freeze();

    AttackConfig& c = f->config;
    c.source = PatchSource::frozen_generator;
    c.epochs = 500;
    c.patch_lr = 0.01;
    c.tv_weight = 0.01;
    c.placement = Placement{16, 16, 32, 32};
    c.seed = 1;
    c.checkpoint_every = 100;
    // 150 px at 416 px input, scaled to the 64 px mock input.
    c.proximity_radius = 150.0 * 64.0 / 416.0;
    return *f;
}

struct DeskRun {
    AttackResult result;
    double seconds = 0;
};

std::optional<DeskRun> first_desk_run;
fs::path scratch;

DeskRun run_desk(const fs::path& dir) {
    DeskFixture& f = desk_fixture();
    const auto t0 = std::chrono::steady_clock::now();
    RunOptions run;
    run.dir = dir;
    DeskRun r{pretrained_gan_attack(f.detector, *f.generator, f.images, f.config, run), 0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

Outcome desk_attack() {
    const auto t0 = std::chrono::steady_clock::now();
    DeskFixture& f = desk_fixture();
    const double setup = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    first_desk_run = run_desk(scratch / "desk_a");
    const AttackResult& r = first_desk_run->result;
    const double before = r.baseline.mean_objectness_near, after = r.final_summary.mean_objectness_near;
    const double drop = 1.0 - after / before;
    // Reference point: an all-black square suppresses the shape detector as
    // far as any dark patch can.
    const PatchSummary black =
        summarize_patch(f.detector, f.images, Patch::filled(32, 32, 0.0), f.config.placement, f.config.proximity_radius);
    const double black_drop = 1.0 - black.mean_objectness_near / before;
    return {drop >= 0.5, fmt("mean objectness near patch %.4f", before) + fmt(" -> %.4f", after) +
                             fmt(", drop %.1f%% (>= 50%%", 100 * drop) + fmt("; black-square oracle %.1f%%)", 100 * black_drop) +
                             fmt("; generator pretraining %.1f s", setup) + fmt(", attack %.1f s", first_desk_run->seconds)};
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

Outcome determinism() {
    if (!first_desk_run) run_desk(scratch / "desk_a");
    run_desk(scratch / "desk_b");
    std::size_t compared = 0, differing = 0;
    for (const auto& e : fs::recursive_directory_iterator(scratch / "desk_a")) {
        if (!e.is_regular_file()) continue;
        const fs::path rel = e.path().lexically_relative(scratch / "desk_a");
        const bool artifact = rel == "metrics.csv" || rel.parent_path() == "checkpoints" || rel == "patch.png" ||
                              rel == "latent.nparc";
        if (!artifact) continue;
        ++compared;
        if (!fs::exists(scratch / "desk_b" / rel) || read_bytes(e.path()) != read_bytes(scratch / "desk_b" / rel)) ++differing;
    }
    return {compared > 0 && differing == 0,
            std::to_string(compared) + " files compared (metrics, checkpoints, patch, latent), " + std::to_string(differing) +
                " differ"};
}

Outcome frozen_contract() {
    DeskFixture& f = desk_fixture();
    const std::string before = hex64(f.generator->digest());
    std::size_t runs = 0;
    if (first_desk_run) ++runs;
    // Vary the options that touch the generator path.
    for (int variant = 0; variant < 4; ++variant) {
        AttackConfig c = f.config;
        c.epochs = 20;
        c.transform = variant & 1;
        c.latent_shift = variant & 2;
        if (variant == 3) {
            c.mode = AttackMode::per_instance;
            pretrained_gan_attack(f.detector, *f.generator, {f.images[0]}, c);
        } else {
            pretrained_gan_attack(f.detector, *f.generator, f.images, c);
        }
        ++runs;
    }
    const std::string after = hex64(f.generator->digest());
    return {before == after, std::to_string(runs) + " runs, digest " + before + (before == after ? " unchanged" : " -> " + after)};
}

// 7 -------------------------------------------------------------------------

Outcome combined_smoke() {
    GeneratorArch arch;
    arch.latent_dim = 8;
    arch.base_channels = 8;
    arch.upsample_blocks = 2;
    Rng crng(701);
    std::vector<int> modes;
    GanCorpus corpus;
    corpus.images = make_flower_corpus(32, 16, crng, &modes);
    const MockDetector det = MockDetector::shape_detector();
    Rng drng(702);
    SyntheticSpec spec;
    spec.images = 2;
    const std::vector<Tensor> images = make_synthetic_dataset(spec, drng).images;

    std::string detail;
    bool ok = true;
    for (CombinedVariant v : {CombinedVariant::v1, CombinedVariant::v2, CombinedVariant::v3}) {
        AttackConfig c;
        c.source = PatchSource::trained_generator;
        c.variant = v;
        c.epochs = 200;
        c.gan_batch = 8;
        c.placement = Placement{16, 16, 32, 32};
        c.seed = 703;
        c.checkpoint_every = 1000;
        GanTrainState gan = GanTrainState::create(arch, nn::AdamOptions{}, 704);
        const AttackResult r = combined_patch_gan_attack(det, gan, corpus, images, c);
        bool finite = r.trajectory.size() == 200;
        for (const EpochRecord& e : r.trajectory) {
            finite = finite && std::isfinite(e.detector_loss) && std::isfinite(e.total_loss) && std::isfinite(e.g_loss) &&
                     std::isfinite(e.d_loss);
        }
        ok = ok && finite;
        detail += to_string(v) + (finite ? " finite" : " NON-FINITE") + ", ";
    }

    // V1 against a zero-gradient detector is plain GAN training.
    const oracles::ConstantDetector zero(64);
    AttackConfig c;
    c.source = PatchSource::trained_generator;
    c.variant = CombinedVariant::v1;
    c.epochs = 200;
    c.gan_batch = 8;
    c.placement = Placement{16, 16, 32, 32};
    c.seed = 705;
    c.checkpoint_every = 1000;
    GanTrainState attacked = GanTrainState::create(arch, nn::AdamOptions{}, 706);
    combined_patch_gan_attack(zero, attacked, corpus, images, c);
    GanTrainState plain = GanTrainState::create(arch, nn::AdamOptions{}, 706);
    plain.g_opt.set_lr(c.gan_lr);
    plain.d_opt.set_lr(c.gan_lr);
    Rng gan_rng = Rng::derive(c.seed, "gan");
    for (std::size_t step = 0; step < c.epochs * images.size(); ++step) {
        const Tensor real = sample_corpus_batch(corpus, c.gan_batch, 16, gan_rng);
        gan_train_step(plain, real, gan_rng);
    }
    const bool same = attacked.generator.digest() == plain.generator.digest() &&
                      attacked.discriminator.digest() == plain.discriminator.digest();
    ok = ok && same;
    detail += same ? "V1 with zero detector gradient matches plain GAN parameter-for-parameter"
                   : "V1 with zero detector gradient DIVERGES from plain GAN";
    return {ok, detail};
}

}  // namespace

int main() {
    scratch = fs::temp_directory_path() / ("natpatch_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    report(1, "gradient correctness (TV and mock detector vs central differences, 100 inputs each)", 30, gradient_correctness);
    report(2, "PGD step oracle (signed-gradient closed form on a quadratic loss)", 5, pgd_step_oracle);
    report(3, "AP oracle equivalence (brute-force precision/recall)", 60, ap_oracle);
    report(4, "compositing and projection invariants", 30, compositing_invariants);
    report(5, "end-to-end desk attack (frozen generator, universal latent attack, 500 epochs)", 120, desk_attack);
    report(6, "determinism (criterion 5 run twice with equal seeds)", 0, determinism);
    report(7, "combined-training smoke (V1/V2/V3, 200 epochs)", 180, combined_smoke);
    report(8, "frozen-generator contract (parameter digest)", 0, frozen_contract);
    std::printf("SKIP criterion 9: extended COCO/YOLOv3 track; needs YOLOv3 weights, the COCO person/bicycle/car subset "
                "and multi-thousand-epoch GPU runs, none of which exist in this environment\n");

    fs::remove_all(scratch);
    std::printf("%s: %d failing criteria\n", failures ? "FAILED" : "ACCEPTED", failures);
    return failures ? 1 : 0;
}
