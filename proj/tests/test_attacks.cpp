#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "natpatch/attacks.hpp"
#include "natpatch/data.hpp"
#include "natpatch/mock_detector.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace natpatch;
using namespace oracles;

namespace {

AttackConfig base_config(std::size_t epochs) {
    AttackConfig c;
    c.epochs = epochs;
    c.placement = Placement{8, 8, 16, 16};
    c.seed = 3;
    c.checkpoint_every = 1000;
    return c;
}

std::vector<Tensor> random_images(std::size_t n, std::size_t size, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(testing::random_tensor({3, size, size}, rng));
    return out;
}

GeneratorArch tiny_arch(std::size_t classes = 0) {
    GeneratorArch a;
    a.latent_dim = 8;
    a.base_channels = 8;
    a.upsample_blocks = 2;
    a.num_classes = classes;
    return a;
}

GeneratorHandle frozen_generator(std::size_t classes = 0) {
    Rng rng(17);
    return GeneratorHandle::create(tiny_arch(classes), rng, false);
}

GanCorpus flower_corpus() {
    Rng rng(19);
    GanCorpus c;
    c.images = make_flower_corpus(16, 16, rng);
    return c;
}

void check_same_trajectory(const AttackResult& a, const AttackResult& b) {
    REQUIRE(a.trajectory.size() == b.trajectory.size());
    for (std::size_t i = 0; i < a.trajectory.size(); ++i) {
        CHECK(metrics_row(a.trajectory[i]) == metrics_row(b.trajectory[i]));
    }
    CHECK(a.patch.pixels == b.patch.pixels);
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_SUITE("attacks") {

TEST_CASE("pgd on a quadratic loss matches a scalar reference loop") {
    const Placement pl{4, 6, 10, 12};
    const QuadraticDetector det(32, pl);
    AttackConfig cfg = base_config(40);
    cfg.placement = pl;
    cfg.tv_weight = 0.0;
    cfg.patch_lr = 0.03;
    cfg.mode = AttackMode::per_instance;
    const auto images = random_images(1, 32, 1);
    const AttackResult r = pgd_patch_attack(det, images, cfg);

    Rng init = Rng::derive(cfg.seed, "patch-init");
    const Patch start = Patch::uniform(10, 12, init);
    std::vector<double> ref(start.pixels.values().begin(), start.pixels.values().end());
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        double loss = 0;
        for (double& v : ref) {
            loss += v * v;
            const double g = 2 * v;
            v -= cfg.patch_lr * (g > 0 ? 1.0 : (g < 0 ? -1.0 : 0.0));
            v = std::min(1.0, std::max(0.0, v));
        }
        CHECK(r.trajectory[e].detector_loss == doctest::Approx(loss).epsilon(1e-12));
    }
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(r.patch.pixels[i] == ref[i]);
    CHECK(r.patch.pixels.max() == 0.0);
}

TEST_CASE("pgd with zero gradient leaves the patch unchanged") {
    const ConstantDetector det(32);
    AttackConfig cfg = base_config(25);
    cfg.tv_weight = 0.0;
    const auto images = random_images(2, 32, 2);
    const AttackResult r = pgd_patch_attack(det, images, cfg);
    Rng init = Rng::derive(cfg.seed, "patch-init");
    CHECK(r.patch.pixels == Patch::uniform(16, 16, init).pixels);
    CHECK(r.trajectory.size() == 25);
}

TEST_CASE("latent attack with a constant loss and no tv leaves z unchanged") {
    const ConstantDetector det(32);
    const GeneratorHandle g = frozen_generator();
    AttackConfig cfg = base_config(20);
    cfg.source = PatchSource::frozen_generator;
    cfg.tv_weight = 0.0;
    const AttackResult r = pretrained_gan_attack(det, g, random_images(1, 32, 3), cfg);
    Rng init = Rng::derive(cfg.seed, "latent-init");
    REQUIRE(r.latent);
    CHECK(r.latent->z == sample_latent(g.arch(), init).z);
}

TEST_CASE("seeded runs reproduce bit-identically with transforms and latent shift") {
    const MockDetector det = MockDetector::random({}, 4, 0.3);
    const GeneratorHandle g = frozen_generator();
    AttackConfig cfg = base_config(15);
    cfg.source = PatchSource::frozen_generator;
    cfg.transform = true;
    cfg.latent_shift = true;
    const auto images = random_images(3, 64, 5);
    const AttackResult a = pretrained_gan_attack(det, g, images, cfg);
    const AttackResult b = pretrained_gan_attack(det, g, images, cfg);
    check_same_trajectory(a, b);
    cfg.seed = 4;
    const AttackResult c = pretrained_gan_attack(det, g, images, cfg);
    CHECK(c.trajectory.back().detector_loss != a.trajectory.back().detector_loss);
}

TEST_CASE("transforms change the composited patch under a fixed latent") {
    const ConstantDetector det(32);
    const GeneratorHandle g = frozen_generator();
    AttackConfig cfg = base_config(3);
    cfg.source = PatchSource::frozen_generator;
    cfg.tv_weight = 0.0;
    cfg.transform = true;
    std::vector<double> tvs;
    RunOptions run;
    run.on_epoch = [&](const EpochRecord& r) { tvs.push_back(r.tv_loss); };
    const AttackResult r = pretrained_gan_attack(det, g, random_images(1, 32, 6), cfg, run);
    // z is fixed (zero gradient), so the base patch and its TV are fixed too;
    // only the transform draw varies, which the detector loss cannot show.
    CHECK(tvs.size() == 3);
    CHECK(tvs[0] == tvs[2]);
    Rng tr = Rng::derive(cfg.seed, "transform");
    const TransformSample s1 = sample_transform(cfg.transform_config, 16, 16, tr);
    const TransformSample s2 = sample_transform(cfg.transform_config, 16, 16, tr);
    CHECK(apply_transform(r.patch, s1).pixels != apply_transform(r.patch, s2).pixels);
}

TEST_CASE("single-image universal training equals the per-instance attack") {
    const MockDetector det = MockDetector::random({}, 7, 0.3);
    AttackConfig cfg = base_config(12);
    cfg.transform = true;
    const auto images = random_images(1, 64, 8);
    cfg.mode = AttackMode::per_instance;
    const AttackResult per = pgd_patch_attack(det, images, cfg);
    const AttackOp op = [&](const std::vector<Tensor>& imgs, const AttackConfig& c) {
        return pgd_patch_attack(det, imgs, c);
    };
    const AttackResult uni = universal_train(op, images, cfg);
    check_same_trajectory(per, uni);
    CHECK_THROWS_AS(pgd_patch_attack(det, random_images(2, 64, 9), cfg), std::invalid_argument);
    CHECK_THROWS_AS(universal_train(op, {}, cfg), std::invalid_argument);
}

TEST_CASE("recorded total loss equals detector plus weighted tv") {
    const MockDetector det = MockDetector::random({}, 10, 0.3);
    AttackConfig cfg = base_config(20);
    cfg.tv_weight = 0.37;
    cfg.patch_lr = 0.2;
    const AttackResult r = pgd_patch_attack(det, random_images(3, 64, 11), cfg);
    for (const EpochRecord& e : r.trajectory) {
        CHECK(std::abs(e.total_loss - (e.detector_loss + 0.37 * e.tv_loss)) < 1e-6);
        CHECK(e.g_loss == 0.0);
        CHECK(e.d_loss == 0.0);
    }
    // Large steps saturate at the clamp bounds but never leave [0, 1].
    CHECK(r.patch.pixels.min() >= 0.0);
    CHECK(r.patch.pixels.max() <= 1.0);
}

TEST_CASE("resumed pgd run matches an uninterrupted one") {
    testing::TempDir dir("resume_pgd");
    const MockDetector det = MockDetector::random({}, 12, 0.3);
    AttackConfig cfg = base_config(9);
    cfg.transform = true;
    cfg.latent_shift = true;
    cfg.checkpoint_every = 3;
    const auto images = random_images(3, 64, 13);
    const AttackResult full = pgd_patch_attack(det, images, cfg);

    RunOptions first{dir.path(), false, 5, {}};
    const AttackResult partial = pgd_patch_attack(det, images, cfg, first);
    CHECK_FALSE(partial.completed);
    CHECK_FALSE(std::filesystem::exists(dir / "patch.png"));
    RunOptions second{dir.path(), true, 0, {}};
    const AttackResult resumed = pgd_patch_attack(det, images, cfg, second);
    CHECK(resumed.completed);
    check_same_trajectory(full, resumed);
    CHECK(resumed.checkpoint_epochs == std::vector<std::size_t>{3, 6, 9});

    // metrics.csv is rebuilt from the checkpointed history, so epochs 4 and 5
    // appear once.
    const std::string csv = read_text(dir / "metrics.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 10);
    CHECK(csv.rfind(metrics_header(), 0) == 0);

    AttackConfig other = cfg;
    other.patch_lr = 0.02;
    CHECK_THROWS_AS(pgd_patch_attack(det, images, other, second), std::invalid_argument);
}

TEST_CASE("run directory layout") {
    testing::TempDir dir("layout");
    const MockDetector det = MockDetector::random({}, 14, 0.3);
    const GeneratorHandle g = frozen_generator();
    AttackConfig cfg = base_config(4);
    cfg.source = PatchSource::frozen_generator;
    cfg.checkpoint_every = 2;
    pretrained_gan_attack(det, g, random_images(2, 64, 15), cfg, RunOptions{dir.path(), false, 0, {}});
    for (const char* f : {"metrics.csv", "state.nparc", "patch.png", "patch.json", "latent.nparc", "summary.json",
                          "checkpoints/patch_e000002.png", "checkpoints/patch_e000004.json",
                          "checkpoints/latent_e000002.nparc"}) {
        CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
    }
    const PatchMetadata meta = load_patch_metadata(dir / "patch.png");
    CHECK(meta.native_height == 16);
    CHECK(meta.seed == 3);
    CHECK(meta.extra["source"] == "frozen_generator");
}

TEST_CASE("frozen generator is bit-stable across an attack") {
    const MockDetector det = MockDetector::random({}, 16, 0.3);
    const GeneratorHandle g = frozen_generator();
    const auto before = g.digest();
    AttackConfig cfg = base_config(100);
    cfg.source = PatchSource::frozen_generator;
    const AttackResult r = pretrained_gan_attack(det, g, random_images(1, 64, 17), cfg);
    CHECK(g.digest() == before);
    CHECK(r.trajectory.size() == 100);

    Rng rng(18);
    const GeneratorHandle trainable = GeneratorHandle::create(tiny_arch(), rng, true);
    CHECK_THROWS_AS(pretrained_gan_attack(det, trainable, random_images(1, 64, 17), cfg), std::logic_error);
    AttackConfig pixel = cfg;
    pixel.source = PatchSource::pixel;
    CHECK_THROWS_AS(pretrained_gan_attack(det, g, random_images(1, 64, 17), pixel), std::invalid_argument);
}

TEST_CASE("conditional class id is recorded in patch metadata") {
    testing::TempDir dir("cls");
    const MockDetector det = MockDetector::random({}, 19, 0.3);
    const GeneratorHandle g = frozen_generator(4);
    AttackConfig cfg = base_config(2);
    cfg.source = PatchSource::frozen_generator;
    cfg.patch_class = 3;
    const AttackResult r = pretrained_gan_attack(det, g, random_images(1, 64, 20), cfg, RunOptions{dir.path()});
    CHECK(r.latent->class_id == 3);
    CHECK(load_patch_metadata(dir / "patch.png").extra["class_id"] == 3);
    cfg.patch_class = 4;
    CHECK_THROWS_AS(pretrained_gan_attack(det, g, random_images(1, 64, 20), cfg), std::invalid_argument);
}

TEST_CASE("V1 with a zero detector gradient is plain GAN training") {
    const ConstantDetector det(32);
    const GanCorpus corpus = flower_corpus();
    AttackConfig cfg = base_config(6);
    cfg.source = PatchSource::trained_generator;
    cfg.variant = CombinedVariant::v1;
    cfg.gan_batch = 4;
    cfg.gan_lr = 1e-3;
    GanTrainState attacked = GanTrainState::create(tiny_arch(), nn::AdamOptions{}, 21);
    const AttackResult r = combined_patch_gan_attack(det, attacked, corpus, random_images(1, 32, 22), cfg);

    GanTrainState plain = GanTrainState::create(tiny_arch(), nn::AdamOptions{}, 21);
    plain.g_opt.set_lr(1e-3);
    plain.d_opt.set_lr(1e-3);
    Rng gan_rng = Rng::derive(cfg.seed, "gan");
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const Tensor real = sample_corpus_batch(corpus, 4, 16, gan_rng);
        const GanLosses l = gan_train_step(plain, real, gan_rng);
        CHECK(r.trajectory[e].g_loss == l.g_loss);
        CHECK(r.trajectory[e].d_loss == l.d_loss);
    }
    CHECK(attacked.generator.digest() == plain.generator.digest());
    CHECK(attacked.discriminator.digest() == plain.discriminator.digest());
}

TEST_CASE("V2 smoke run keeps patches in range and losses finite") {
    MockDetectorConfig mc;
    const MockDetector det = MockDetector::shape_detector(mc);
    Rng drng(23);
    SyntheticSpec spec;
    spec.images = 1;
    const SyntheticDataset data = make_synthetic_dataset(spec, drng);
    AttackConfig cfg = base_config(200);
    cfg.source = PatchSource::trained_generator;
    cfg.variant = CombinedVariant::v2;
    cfg.gan_batch = 4;
    cfg.placement = Placement{16, 16, 32, 32};
    GanTrainState state = GanTrainState::create(tiny_arch(), nn::AdamOptions{}, 24);
    const AttackResult r = combined_patch_gan_attack(det, state, flower_corpus(), data.images, cfg);
    CHECK(r.patch.pixels.min() >= 0.0);
    CHECK(r.patch.pixels.max() <= 1.0);
    std::vector<double> head, tail;
    for (const EpochRecord& e : r.trajectory) {
        CHECK(std::isfinite(e.g_loss));
        CHECK(std::isfinite(e.d_loss));
        CHECK(std::isfinite(e.detector_loss));
        if (e.epoch <= 50) head.push_back(e.detector_loss);
        if (e.epoch > 150) tail.push_back(e.detector_loss);
    }
    CHECK(median(tail) <= median(head));
    CHECK(state.history.size() == 200);
}

TEST_CASE("V3 updates the generator once per step") {
    const MockDetector det = MockDetector::random({}, 25, 0.3);
    AttackConfig cfg = base_config(5);
    cfg.source = PatchSource::trained_generator;
    cfg.variant = CombinedVariant::v3;
    cfg.gan_batch = 4;
    GanTrainState state = GanTrainState::create(tiny_arch(), nn::AdamOptions{}, 26);
    const AttackResult r = combined_patch_gan_attack(det, state, flower_corpus(), random_images(2, 64, 27), cfg);
    CHECK(state.g_opt.steps() == 10);
    CHECK(state.d_opt.steps() == 10);
    CHECK(state.history.size() == 10);
    for (const EpochRecord& e : r.trajectory) CHECK(e.g_loss > 0.0);

    GanTrainState v2 = GanTrainState::create(tiny_arch(), nn::AdamOptions{}, 26);
    cfg.variant = CombinedVariant::v2;
    combined_patch_gan_attack(det, v2, flower_corpus(), random_images(2, 64, 27), cfg);
    CHECK(v2.g_opt.steps() == 20);
}

TEST_CASE("resumed combined run matches an uninterrupted one") {
    testing::TempDir dir("resume_gan");
    const MockDetector det = MockDetector::random({}, 28, 0.3);
    AttackConfig cfg = base_config(6);
    cfg.source = PatchSource::trained_generator;
    cfg.gan_batch = 4;
    cfg.checkpoint_every = 2;
    const auto images = random_images(2, 64, 29);
    GanTrainState a = GanTrainState::create(tiny_arch(), nn::AdamOptions{}, 30);
    const AttackResult full = combined_patch_gan_attack(det, a, flower_corpus(), images, cfg);

    GanTrainState b = GanTrainState::create(tiny_arch(), nn::AdamOptions{}, 30);
    combined_patch_gan_attack(det, b, flower_corpus(), images, cfg, RunOptions{dir.path(), false, 3, {}});
    GanTrainState c = GanTrainState::create(tiny_arch(), nn::AdamOptions{}, 99);
    const AttackResult resumed =
        combined_patch_gan_attack(det, c, flower_corpus(), images, cfg, RunOptions{dir.path(), true, 0, {}});
    check_same_trajectory(full, resumed);
    CHECK(c.generator.digest() == a.generator.digest());
    CHECK(std::filesystem::exists(dir / "generator.nparc"));
    CHECK(std::filesystem::exists(dir / "checkpoints" / "generator_e000004.nparc"));
}

TEST_CASE("universal pgd lowers objectness on synthetic scenes") {
    const MockDetector det = MockDetector::shape_detector();
    Rng rng(31);
    const SyntheticDataset data = make_synthetic_dataset(SyntheticSpec{}, rng);
    AttackConfig cfg = base_config(100);
    cfg.placement = Placement{16, 16, 32, 32};
    cfg.proximity_radius = 100;
    const AttackOp op = [&](const std::vector<Tensor>& imgs, const AttackConfig& c) {
        return pgd_patch_attack(det, imgs, c);
    };
    const AttackResult r = universal_train(op, data.images, cfg);
    CHECK(r.final_summary.mean_objectness_near < r.baseline.mean_objectness_near);
    CHECK(r.trajectory.back().detector_loss < r.trajectory.front().detector_loss);
}

TEST_CASE("attack config json round trip and validation") {
    AttackConfig c;
    c.mode = AttackMode::per_instance;
    c.source = PatchSource::trained_generator;
    c.variant = CombinedVariant::v3;
    c.placement = Placement{1, 2, 3, 4};
    c.patch_class = 985;
    const AttackConfig d = AttackConfig::from_json(c.to_json());
    CHECK(d.to_json() == c.to_json());
    CHECK_THROWS_AS(AttackConfig::from_json({{"patch_lr", 0.1}, {"learning_rate", 0.1}}), std::invalid_argument);
    CHECK_THROWS_AS(AttackConfig::from_json({{"variant", "V4"}}), std::invalid_argument);
    CHECK_THROWS_AS(AttackConfig::from_json({{"epochs", "many"}}), std::invalid_argument);
    AttackConfig bad;
    bad.patch_lr = 0;
    bad.epochs = 0;
    try {
        bad.validate();
        FAIL("expected invalid_argument");
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        CHECK(msg.find("patch_lr") != std::string::npos);
        CHECK(msg.find("epochs") != std::string::npos);
    }
    CHECK(AttackConfig{}.patch_lr == 0.01);
    CHECK(AttackConfig{}.gan_lr == 0.0002);
    CHECK(AttackConfig{}.tv_weight == 0.01);
}

TEST_CASE("metrics rows print full precision") {
    EpochRecord r;
    r.epoch = 7;
    r.detector_loss = 0.1;
    CHECK(metrics_row(r).rfind("7,0.10000000000000001,", 0) == 0);
    CHECK(metrics_header() == "epoch,detector_loss,tv_loss,g_loss,d_loss,total_loss,mean_objectness_near,detections");
}

}  // TEST_SUITE
