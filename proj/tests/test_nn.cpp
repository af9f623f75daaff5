#include <doctest.h>

#include <cmath>
#include <tuple>

#include "natpatch/nn.hpp"
#include "support.hpp"

using namespace natpatch;
using namespace natpatch::nn;

namespace {

Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0), k = w.dim(2);
    const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
    Tensor y({cout, oh, ow});
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
                double acc = b.empty() ? 0.0 : b[o];
                for (std::size_t c = 0; c < cin; ++c)
                    for (std::size_t u = 0; u < k; ++u)
                        for (std::size_t v = 0; v < k; ++v) {
                            const long long yy = static_cast<long long>(i * stride + u) - static_cast<long long>(pad);
                            const long long xx = static_cast<long long>(j * stride + v) - static_cast<long long>(pad);
                            if (yy < 0 || xx < 0 || yy >= static_cast<long long>(h) || xx >= static_cast<long long>(wd)) continue;
                            acc += w.at(o, c, u, v) * x.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                        }
                y.at(o, i, j) = acc;
            }
    return y;
}

// Scatter form of the transposed convolution, weight (Cin, Cout, k, k).
Tensor naive_conv_transpose(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
    const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(1), k = w.dim(2);
    const std::size_t oh = (h - 1) * stride + k - 2 * pad, ow = (wd - 1) * stride + k - 2 * pad;
    Tensor y({cout, oh, ow});
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < wd; ++j)
                for (std::size_t o = 0; o < cout; ++o)
                    for (std::size_t u = 0; u < k; ++u)
                        for (std::size_t v = 0; v < k; ++v) {
                            const long long yy = static_cast<long long>(i * stride + u) - static_cast<long long>(pad);
                            const long long xx = static_cast<long long>(j * stride + v) - static_cast<long long>(pad);
                            if (yy < 0 || xx < 0 || yy >= static_cast<long long>(oh) || xx >= static_cast<long long>(ow)) continue;
                            y.at(o, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) += x.at(c, i, j) * w.at(c, o, u, v);
                        }
    return y;
}

// Weighted sum of outputs: a scalar whose gradient is the weights.
double probe(const Tensor& y, const Tensor& weights) {
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * weights[i];
    return s;
}

void check_layer_gradients(Layer& layer, const Tensor& x, Rng& rng, bool train) {
    Cache cache;
    const Tensor y = train ? layer.forward_train(x, cache, false) : layer.forward(x, cache);
    const Tensor weights = testing::random_tensor(y.shape(), rng, -1, 1);
    auto params = layer.parameters();
    std::vector<Tensor> grads;
    for (auto* p : params) grads.emplace_back(p->shape());
    const Tensor gx = layer.backward(weights, cache, grads);

    auto eval = [&](const Tensor& input) {
        Cache c;
        return probe(train ? layer.forward_train(input, c, false) : layer.forward(input, c), weights);
    };
    for (std::size_t t = 0; t < 12; ++t) {
        const std::size_t i = rng.index(x.size());
        CHECK(testing::relative_error(gx[i], testing::central_difference(eval, x, i, 1e-5)) < 1e-5);
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t t = 0; t < 6; ++t) {
            const std::size_t i = rng.index(params[p]->size());
            const double saved = (*params[p])[i];
            (*params[p])[i] = saved + 1e-5;
            const double up = eval(x);
            (*params[p])[i] = saved - 1e-5;
            const double down = eval(x);
            (*params[p])[i] = saved;
            CHECK(testing::relative_error(grads[p][i], (up - down) / 2e-5) < 1e-5);
        }
    }
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("conv2d matches a direct loop") {
    Rng rng(1);
    for (auto [k, s, p] : {std::tuple{3ul, 1ul, 1ul}, std::tuple{4ul, 2ul, 1ul}, std::tuple{1ul, 1ul, 0ul}, std::tuple{3ul, 2ul, 0ul}}) {
        const Tensor x = testing::random_tensor({3, 9, 9}, rng, -1, 1);
        const Tensor w = testing::random_tensor({5, 3, k, k}, rng, -1, 1);
        const Tensor b = testing::random_tensor({5}, rng, -1, 1);
        const Tensor y = conv2d(x, w, b, ConvGeometry{k, s, p});
        const Tensor ref = naive_conv(x, w, b, s, p);
        REQUIRE(y.shape() == ref.shape());
        for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv transpose matches the scatter definition") {
    Rng rng(2);
    ConvTranspose2d layer(3, 2, ConvGeometry{4, 2, 1}, false);
    layer.weight() = testing::random_tensor({3, 2, 4, 4}, rng, -1, 1);
    const Tensor x = testing::random_tensor({1, 3, 5, 5}, rng, -1, 1);
    Cache cache;
    const Tensor y = layer.forward(x, cache);
    const Tensor ref = naive_conv_transpose(x.slice(0), layer.weight(), 2, 1);
    REQUIRE(y.slice(0).shape() == ref.shape());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("layer gradients match finite differences") {
    Rng rng(3);
    SUBCASE("conv2d") {
        Conv2d conv(2, 3, ConvGeometry{3, 2, 1});
        for (auto* p : conv.parameters()) init_normal(*p, rng, 0, 0.5);
        check_layer_gradients(conv, testing::random_tensor({2, 2, 7, 7}, rng, -1, 1), rng, false);
    }
    SUBCASE("conv transpose") {
        ConvTranspose2d conv(3, 2, ConvGeometry{4, 2, 1});
        for (auto* p : conv.parameters()) init_normal(*p, rng, 0, 0.5);
        check_layer_gradients(conv, testing::random_tensor({2, 3, 4, 4}, rng, -1, 1), rng, false);
    }
    SUBCASE("batch norm in training mode") {
        BatchNorm2d bn(3);
        init_normal(bn.gamma(), rng, 1, 0.3);
        check_layer_gradients(bn, testing::random_tensor({4, 3, 3, 3}, rng, -1, 1), rng, true);
    }
    SUBCASE("batch norm in inference mode") {
        BatchNorm2d bn(2);
        init_normal(bn.gamma(), rng, 1, 0.3);
        check_layer_gradients(bn, testing::random_tensor({2, 2, 3, 3}, rng, -1, 1), rng, false);
    }
    SUBCASE("activations") {
        for (Activation a : {Activation::relu, Activation::leaky_relu, Activation::tanh, Activation::sigmoid, Activation::identity}) {
            ActivationLayer act(a);
            check_layer_gradients(act, testing::random_tensor({1, 2, 4, 4}, rng, -2, 2), rng, false);
        }
    }
}

TEST_CASE("sequential backward accumulates parameter gradients") {
    Rng rng(4);
    Sequential net;
    net.add<Conv2d>(3, 4, ConvGeometry{3, 1, 1});
    net.add<BatchNorm2d>(4);
    net.add<ActivationLayer>(Activation::leaky_relu);
    net.add<Conv2d>(4, 1, ConvGeometry{4, 1, 0});
    for (auto* p : net.parameters()) init_normal(*p, rng, 0, 0.4);
    const Tensor x = testing::random_tensor({3, 3, 4, 4}, rng, -1, 1);
    Tape tape;
    const Tensor y = net.forward_train(x, tape, false);
    const Tensor w = testing::random_tensor(y.shape(), rng, -1, 1);
    auto grads = net.zero_gradients();
    net.backward(w, tape, &grads);
    auto params = net.parameters();
    auto eval = [&]() {
        Tape t;
        return probe(net.forward_train(x, t, false), w);
    };
    for (std::size_t p = 0; p < params.size(); ++p) {
        const std::size_t i = rng.index(params[p]->size());
        const double saved = (*params[p])[i];
        (*params[p])[i] = saved + 1e-5;
        const double up = eval();
        (*params[p])[i] = saved - 1e-5;
        const double down = eval();
        (*params[p])[i] = saved;
        CHECK(testing::relative_error(grads[p][i], (up - down) / 2e-5) < 1e-5);
    }
}

TEST_CASE("batch norm running statistics follow the momentum rule") {
    BatchNorm2d bn(1, 0.1);
    Tensor x({2, 1, 1, 2});
    x[0] = 1;
    x[1] = 3;
    x[2] = 5;
    x[3] = 7;
    Cache cache;
    bn.forward_train(x, cache, true);
    auto buffers = bn.buffers();
    // batch mean 4, unbiased variance 20/3
    CHECK((*buffers[0])[0] == doctest::Approx(0.4));
    CHECK((*buffers[1])[0] == doctest::Approx(0.9 + 0.1 * 20.0 / 3.0));
    Cache c2;
    bn.forward_train(x, c2, false);
    CHECK((*buffers[0])[0] == doctest::Approx(0.4));
}

TEST_CASE("adam step matches the scalar update rule") {
    Tensor p({2});
    p[0] = 1.0;
    p[1] = -2.0;
    AdamOptions opt{0.1, 0.9, 0.999, 1e-8};
    Adam adam(opt, std::vector<const Tensor*>{&p});
    double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
    for (int t = 1; t <= 3; ++t) {
        Tensor g({2});
        g[0] = 0.5 * t;
        g[1] = -1.5;
        adam.step({&p}, {g});
        for (int i = 0; i < 2; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * g[static_cast<std::size_t>(i)];
            v[i] = 0.999 * v[i] + 0.001 * g[static_cast<std::size_t>(i)] * g[static_cast<std::size_t>(i)];
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
        }
        CHECK(p[0] == doctest::Approx(ref[0]).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(ref[1]).epsilon(1e-12));
    }
    CHECK(adam.steps() == 3);
}

TEST_CASE("adam state survives an archive round trip") {
    Rng rng(5);
    Tensor p = testing::random_tensor({3}, rng);
    Adam a(AdamOptions{}, std::vector<const Tensor*>{&p});
    a.step({&p}, {testing::random_tensor({3}, rng)});
    Archive ar;
    a.export_to(ar, "opt");
    Tensor q = p;
    Adam b(AdamOptions{}, std::vector<const Tensor*>{&q});
    b.import_from(ar, "opt");
    const Tensor g = testing::random_tensor({3}, rng);
    a.step({&p}, {g});
    b.step({&q}, {g});
    CHECK(p == q);
}

TEST_CASE("sequential copies are independent and digests track parameters") {
    Rng rng(6);
    Sequential net;
    net.add<Conv2d>(1, 1, ConvGeometry{3, 1, 1});
    for (auto* p : net.parameters()) init_normal(*p, rng, 0, 1);
    Sequential copy = net;
    CHECK(copy.digest() == net.digest());
    (*copy.parameters()[0])[0] += 1.0;
    CHECK(copy.digest() != net.digest());
}

TEST_CASE("softplus is stable at extremes") {
    CHECK(softplus(1000.0) == doctest::Approx(1000.0));
    CHECK(softplus(-1000.0) >= 0.0);
    CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
    CHECK(sigmoid(0.0) == 0.5);
}

}  // TEST_SUITE
