#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <fstream>

#include "natpatch/darknet.hpp"
#include "natpatch/nn.hpp"
#include "support.hpp"

using namespace natpatch;

namespace {

// Two heads, every supported section type.
const char* kTinyCfg = R"([net]
width=32
height=32
channels=3

[convolutional]
batch_normalize=1
filters=4
size=3
stride=1
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[convolutional]
batch_normalize=1
filters=8
size=3
stride=1
pad=1
activation=leaky

[convolutional]
batch_normalize=1
filters=8
size=1
stride=1
pad=1
activation=leaky

[shortcut]
from=-2
activation=linear

[maxpool]
size=2
stride=1

[convolutional]
filters=14
size=1
stride=1
pad=1
activation=linear

[yolo]
mask=2,3
anchors=4,4, 8,8, 12,12, 20,20
classes=2
num=4

[route]
layers=-4

[convolutional]
batch_normalize=1
filters=4
size=3
stride=2
pad=1
activation=leaky

[upsample]
stride=2

[route]
layers=-1, 2

[convolutional]
filters=14
size=1
stride=1
pad=1
activation=linear

[yolo]
mask=0,1
anchors=4,4, 8,8, 12,12, 20,20
classes=2
num=4
)";

const char* kSingleCfg = R"([net]
width=2
height=2
channels=3

[convolutional]
batch_normalize=1
filters=7
size=1
stride=1
pad=1
activation=linear

[yolo]
mask=0
anchors=10,10
classes=2
)";

const std::vector<std::string> kNames{"a", "b"};

std::string with_replaced(std::string text, const std::string& from, const std::string& to) {
    text.replace(text.find(from), from.size(), to);
    return text;
}

struct SingleWeights {
    float bias[7], scales[7], mean[7], variance[7], weight[7][3];
};

SingleWeights single_weights() {
    SingleWeights w{};
    for (int f = 0; f < 7; ++f) {
        w.bias[f] = 0.5f * static_cast<float>(f) - 1.0f;
        w.scales[f] = 2.0f;
        w.mean[f] = 0.5f;
        w.variance[f] = 4.0f;
        for (int c = 0; c < 3; ++c) w.weight[f][c] = 0.25f * static_cast<float>(c + 1) - 0.125f * static_cast<float>(f);
    }
    return w;
}

void write_single_weights(const std::filesystem::path& path, const SingleWeights& w, bool legacy_header) {
    std::ofstream out(path, std::ios::binary);
    const std::int32_t header[3] = {0, legacy_header ? 1 : 2, 0};
    out.write(reinterpret_cast<const char*>(header), sizeof(header));
    if (legacy_header) {
        const std::int32_t seen = 0;
        out.write(reinterpret_cast<const char*>(&seen), 4);
    } else {
        const std::uint64_t seen = 0;
        out.write(reinterpret_cast<const char*>(&seen), 8);
    }
    out.write(reinterpret_cast<const char*>(w.bias), sizeof(w.bias));
    out.write(reinterpret_cast<const char*>(w.scales), sizeof(w.scales));
    out.write(reinterpret_cast<const char*>(w.mean), sizeof(w.mean));
    out.write(reinterpret_cast<const char*>(w.variance), sizeof(w.variance));
    out.write(reinterpret_cast<const char*>(w.weight), sizeof(w.weight));
}

// Unfolded batch norm as darknet computes it.
double single_expected(const SingleWeights& w, const Tensor& x, int f, std::size_t y, std::size_t xx) {
    double z = 0;
    for (int c = 0; c < 3; ++c) z += static_cast<double>(w.weight[f][c]) * x.at(static_cast<std::size_t>(c), y, xx);
    return static_cast<double>(w.scales[f]) * (z - static_cast<double>(w.mean[f])) /
               (std::sqrt(static_cast<double>(w.variance[f])) + 1e-6) +
           static_cast<double>(w.bias[f]);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

DarknetDetector random_tiny(std::uint64_t seed) {
    DarknetDetector det(kTinyCfg, kNames);
    Rng rng(seed);
    det.randomize(rng, 0.3);
    return det;
}

}  // namespace

TEST_SUITE("darknet") {

TEST_CASE("cfg parsing") {
    const auto sections = parse_darknet_cfg("# header\n[net]\nwidth = 64 ; trailing\n\n[yolo]\nmask=0, 2,\nanchors=1.5,2\n");
    REQUIRE(sections.size() == 2);
    CHECK(sections[0].type == "net");
    CHECK(sections[0].get_int("width", 0) == 64);
    CHECK(sections[0].get("height", "none") == "none");
    CHECK(sections[1].get_ints("mask") == std::vector<int>{0, 2});
    CHECK(sections[1].get_doubles("anchors") == std::vector<double>{1.5, 2.0});
    CHECK_THROWS_AS(parse_darknet_cfg("width=3\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_darknet_cfg("[net\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_darknet_cfg("[net]\nwidth=abc\n")[0].get_int("width", 0), std::invalid_argument);
}

TEST_CASE("layer shapes of the tiny network") {
    const DarknetDetector det(kTinyCfg, kNames);
    CHECK(det.input_size() == 32);
    CHECK(det.layer_count() == 14);
    const auto heads = det.yolo_outputs(Tensor({3, 32, 32}, 0.5));
    REQUIRE(heads.size() == 2);
    for (const Tensor& h : heads) CHECK(h.shape() == std::vector<std::size_t>{14, 16, 16});
    CHECK(det.infer(Tensor({3, 32, 32}, 0.5)).size() == 2 * 2 * 16 * 16);
}

TEST_CASE("convolution with batch norm matches the unfolded formula") {
    testing::TempDir dir("darknet");
    const SingleWeights w = single_weights();
    Rng rng(4);
    const Tensor x = testing::random_tensor({3, 2, 2}, rng);
    for (bool legacy : {false, true}) {
        CAPTURE(legacy);
        write_single_weights(dir / "single.weights", w, legacy);
        DarknetDetector det(kSingleCfg, kNames);
        det.load_weights(dir / "single.weights");
        const Tensor out = det.yolo_outputs(x).at(0);
        for (int f = 0; f < 7; ++f)
            for (std::size_t yy = 0; yy < 2; ++yy)
                for (std::size_t xx = 0; xx < 2; ++xx)
                    CHECK(out.at(static_cast<std::size_t>(f), yy, xx) == doctest::Approx(single_expected(w, x, f, yy, xx)).epsilon(1e-12));
    }
}

TEST_CASE("decoding follows the yolo box parameterisation") {
    testing::TempDir dir("darknet");
    const SingleWeights w = single_weights();
    write_single_weights(dir / "single.weights", w, false);
    DarknetDetector det(kSingleCfg, kNames);
    det.load_weights(dir / "single.weights");
    Rng rng(5);
    const Tensor x = testing::random_tensor({3, 2, 2}, rng);
    const auto cands = det.infer(x);
    REQUIRE(cands.size() == 4);
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (std::size_t yy = 0; yy < 2; ++yy)
        for (std::size_t xx = 0; xx < 2; ++xx) {
            const Candidate& c = cands[yy * 2 + xx];
            auto v = [&](int f) { return single_expected(w, x, f, yy, xx); };
            // Grid of 2 cells on a 2-pixel input: one pixel per cell.
            const double cx = static_cast<double>(xx) + sig(v(0));
            const double cy = static_cast<double>(yy) + sig(v(1));
            const double bw = 10 * std::exp(v(2)), bh = 10 * std::exp(v(3));
            CHECK(c.box.x1 == doctest::Approx(cx - bw / 2));
            CHECK(c.box.y2 == doctest::Approx(cy + bh / 2));
            CHECK(c.objectness == doctest::Approx(sig(v(4))));
            CHECK(c.class_probs.at(1) == doctest::Approx(sig(v(6))));
        }
    const NetworkLoss loss = det.network_vanish_loss(x, false);
    double expected = 0;
    for (std::size_t yy = 0; yy < 2; ++yy)
        for (std::size_t xx = 0; xx < 2; ++xx) expected += std::log1p(std::exp(single_expected(w, x, 4, yy, xx)));
    CHECK(loss.loss == doctest::Approx(expected));
    CHECK(loss.gradient.size() == 0);
}

TEST_CASE("weights survive a save and load") {
    testing::TempDir dir("darknet");
    const DarknetDetector det = random_tiny(6);
    det.save_weights(dir / "a.weights");
    DarknetDetector again(kTinyCfg, kNames);
    again.load_weights(dir / "a.weights");
    again.save_weights(dir / "b.weights");
    CHECK(testing::read_file(dir / "a.weights") == testing::read_file(dir / "b.weights"));
    Rng rng(7);
    const Tensor x = testing::random_tensor({3, 32, 32}, rng);
    const auto h1 = det.yolo_outputs(x), h2 = again.yolo_outputs(x);
    for (std::size_t i = 0; i < h1.size(); ++i) CHECK(max_abs_diff(h1[i], h2[i]) < 1e-4);

    // Truncated file.
    const std::string bytes = testing::read_file(dir / "a.weights");
    std::ofstream(dir / "short.weights", std::ios::binary) << bytes.substr(0, bytes.size() - 8);
    CHECK_THROWS_WITH_AS(again.load_weights(dir / "short.weights"), doctest::Contains("ended early"), std::runtime_error);
    CHECK_THROWS_AS(again.load_weights(dir / "missing.weights"), std::runtime_error);

    std::ofstream(dir / "tiny.cfg") << kTinyCfg;
    std::ofstream(dir / "names.txt") << "a\nb\n";
    const DarknetDetector loaded = DarknetDetector::load(dir / "tiny.cfg", dir / "a.weights", dir / "names.txt");
    CHECK(max_abs_diff(loaded.yolo_outputs(x)[1], h2[1]) == 0.0);
}

TEST_CASE("input gradient of the vanishing loss matches finite differences") {
    const DarknetDetector det = random_tiny(8);
    Rng rng(9);
    const Tensor x = testing::random_tensor({3, 32, 32}, rng);
    const NetworkLoss nl = det.network_vanish_loss(x, true);
    REQUIRE(nl.gradient.shape() == x.shape());
    auto f = [&](const Tensor& t) { return det.network_vanish_loss(t, false).loss; };
    double worst = 0;
    for (int k = 0; k < 40; ++k) {
        const std::size_t i = rng.index(x.size());
        const double fd = testing::central_difference(f, x, i, 1e-6);
        worst = std::max(worst, testing::relative_error(nl.gradient[i], fd, 1e-4));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("upsample and maxpool behave like darknet") {
    // 1x1 linear conv with unit weights turns the net into a probe of the
    // layer under test.
    const std::string cfg = R"([net]
width=4
height=4

[maxpool]
size=2
stride=1

[convolutional]
filters=6
size=1
stride=2
activation=linear

[upsample]
stride=2

[yolo]
mask=0
anchors=1,1
classes=1
)";
    DarknetDetector det(cfg, {"x"});
    testing::TempDir dir("darknet");
    {
        std::ofstream out(dir / "w", std::ios::binary);
        const std::int32_t header[3] = {0, 2, 0};
        const std::uint64_t seen = 0;
        out.write(reinterpret_cast<const char*>(header), sizeof(header));
        out.write(reinterpret_cast<const char*>(&seen), 8);
        const float bias[6] = {};
        float weight[6][3] = {};
        for (auto& row : weight) row[0] = 1.0f;
        out.write(reinterpret_cast<const char*>(bias), sizeof(bias));
        out.write(reinterpret_cast<const char*>(weight), sizeof(weight));
    }
    det.load_weights(dir / "w");
    Tensor x({3, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
    const Tensor out = det.yolo_outputs(x).at(0);
    REQUIRE(out.shape() == std::vector<std::size_t>{6, 4, 4});
    // maxpool(2, 1) keeps 4x4 with a right/bottom edge clamp; the stride-2
    // conv samples (0,0),(0,2),(2,0),(2,2) and upsampling repeats each.
    const double expected[4][4] = {{5, 5, 7, 7}, {5, 5, 7, 7}, {13, 13, 15, 15}, {13, 13, 15, 15}};
    for (std::size_t yy = 0; yy < 4; ++yy)
        for (std::size_t xx = 0; xx < 4; ++xx) CHECK(out.at(3, yy, xx) == expected[yy][xx]);
    const NetworkLoss nl = det.network_vanish_loss(x, true);
    // Only the four pooled maxima receive gradient.
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < nl.gradient.size(); ++i) nonzero += nl.gradient[i] != 0.0;
    CHECK(nonzero == 4);
    CHECK(nl.gradient.at(0, 1, 1) > 0);
}

TEST_CASE("configuration errors name the problem") {
    CHECK_THROWS_WITH_AS(DarknetDetector(kTinyCfg, {"a", "b", "c"}), doctest::Contains("has 2 classes but 3 names"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(DarknetDetector(with_replaced(kSingleCfg, "filters=7", "filters=6"), kNames),
                         doctest::Contains("expects 7 channels, got 6"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(DarknetDetector(with_replaced(kSingleCfg, "activation=linear", "activation=mish"), kNames),
                         doctest::Contains("unsupported activation mish"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(DarknetDetector(with_replaced(kTinyCfg, "layers=-4", "layers=20"), kNames),
                         doctest::Contains("does not precede"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(DarknetDetector(with_replaced(kSingleCfg, "[yolo]", "[dropout]"), kNames),
                         doctest::Contains("unsupported darknet section [dropout]"), std::invalid_argument);
    CHECK_THROWS_AS(DarknetDetector(with_replaced(kSingleCfg, "channels=3", "channels=1"), kNames), std::invalid_argument);
    CHECK_THROWS_AS(DarknetDetector(with_replaced(kSingleCfg, "[net]", "[convolutional]"), kNames), std::invalid_argument);
    const DarknetDetector det(kSingleCfg, kNames);
    CHECK_THROWS_AS(det.infer(Tensor({3, 4, 4})), std::invalid_argument);
    CHECK_THROWS_AS(DarknetDetector::load("/nonexistent.cfg", "/x", "/y"), std::runtime_error);
}

}  // TEST_SUITE
