#include <doctest.h>

#include <fstream>
#include <set>

#include "natpatch/archive.hpp"
#include "natpatch/rng.hpp"
#include "natpatch/tensor.hpp"
#include "support.hpp"

using namespace natpatch;

TEST_SUITE("core") {

TEST_CASE("tensor indexing follows channel-major layout") {
    Tensor t({2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
    CHECK(t.at(1, 2, 3) == 23.0);
    CHECK(t.at(0, 1, 0) == 4.0);
    Tensor b = t.reshaped({1, 2, 3, 4});
    CHECK(b.at(0, 1, 2, 3) == 23.0);
    CHECK_THROWS_AS(t.reshaped({5, 5}), std::invalid_argument);
}

TEST_CASE("tensor arithmetic and reductions") {
    Tensor a({3}, 1.0), b({3}, 2.0);
    a[2] = -4.0;
    const Tensor c = a + b;
    CHECK(c[0] == 3.0);
    CHECK(c[2] == -2.0);
    CHECK((b - a)[2] == 6.0);
    CHECK((a * 2.0)[1] == 2.0);
    CHECK(a.sum() == -2.0);
    CHECK(a.min() == -4.0);
    CHECK(a.max() == 1.0);
    Tensor d({4});
    CHECK_THROWS_AS(a += d, std::invalid_argument);
}

TEST_CASE("stack and slice are inverse") {
    Rng rng(1);
    const Tensor x = testing::random_tensor({3, 2, 2}, rng);
    const Tensor y = testing::random_tensor({3, 2, 2}, rng);
    const Tensor s = stack({x, y});
    CHECK(s.shape() == std::vector<std::size_t>{2, 3, 2, 2});
    CHECK(s.slice(0) == x);
    CHECK(s.slice(1) == y);
}

TEST_CASE("rng streams are reproducible and resumable") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
    const std::string state = a.save_state();
    std::vector<double> expected;
    for (int i = 0; i < 10; ++i) expected.push_back(a.normal());
    Rng c(0);
    c.load_state(state);
    for (int i = 0; i < 10; ++i) CHECK(c.normal() == expected[static_cast<std::size_t>(i)]);
}

TEST_CASE("derived streams differ by purpose") {
    Rng a = Rng::derive(7, "shuffle");
    Rng b = Rng::derive(7, "transform");
    Rng c = Rng::derive(7, "shuffle");
    CHECK(a.next_u64() != b.next_u64());
    Rng a2 = Rng::derive(7, "shuffle");
    CHECK(a2.next_u64() == c.next_u64());
}

TEST_CASE("uniform index covers its range without bias beyond sampling noise") {
    Rng rng(3);
    std::vector<int> counts(5, 0);
    for (int i = 0; i < 50000; ++i) ++counts[rng.index(5)];
    for (int c : counts) CHECK(std::abs(c - 10000) < 400);
}

TEST_CASE("normal samples have unit variance") {
    Rng rng(5);
    double sum = 0, sq = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double v = rng.normal();
        sum += v;
        sq += v * v;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("shuffle is a permutation") {
    Rng rng(9);
    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    rng.shuffle(v);
    CHECK(std::set<int>(v.begin(), v.end()).size() == 8);
}

TEST_CASE("archive round trip preserves tensors and metadata") {
    testing::TempDir dir("archive");
    Rng rng(11);
    Archive a;
    a.meta["kind"] = "test";
    a.meta["n"] = 3;
    a.tensors["w"] = testing::random_tensor({2, 3}, rng, -1, 1);
    a.tensors["b"] = Tensor({4}, 0.25);
    write_archive(dir / "a.nparc", a);
    const Archive r = read_archive(dir / "a.nparc");
    CHECK(r.meta["kind"] == "test");
    CHECK(r.tensor("w") == a.tensors["w"]);
    CHECK(r.tensor("b") == a.tensors["b"]);
    CHECK(archive_digest(r) == archive_digest(a));
    CHECK_THROWS_AS(r.tensor("missing"), std::runtime_error);
}

TEST_CASE("archive errors name the file") {
    testing::TempDir dir("archive_err");
    const auto missing = dir / "nope.nparc";
    try {
        read_archive(missing);
        FAIL("expected failure");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find(missing.string()) != std::string::npos);
    }

    Archive a;
    a.tensors["x"] = Tensor({16}, 1.0);
    write_archive(dir / "x.nparc", a);
    {
        std::fstream f(dir / "x.nparc", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-3, std::ios::end);
        f.put('\x7f');
    }
    try {
        read_archive(dir / "x.nparc");
        FAIL("expected digest failure");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("digest") != std::string::npos);
        CHECK(msg.find("x.nparc") != std::string::npos);
    }
    {
        std::ofstream f(dir / "bad.nparc", std::ios::binary);
        f << "NOTMAGIC";
    }
    CHECK_THROWS_AS(read_archive(dir / "bad.nparc"), std::runtime_error);
}

}  // TEST_SUITE
