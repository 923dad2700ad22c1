#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "protego/core.hpp"
#include "protego/image_ops.hpp"

using namespace protego;

TEST_CASE("rng is deterministic per seed") {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a.next();
        CHECK(x == b.next());
        differs |= x != c.next();
    }
    CHECK(differs);
}

TEST_CASE("rng uniform and index stay in range") {
    Rng rng(7);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(rng.index(13) < 13u);
    }
}

TEST_CASE("rng normal has roughly unit moments") {
    Rng rng(3);
    double s = 0.0, s2 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.05);
    CHECK(std::abs(s2 / n - 1.0) < 0.05);
}

TEST_CASE("shuffle yields a permutation") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<int> v(1 + trial);
        std::iota(v.begin(), v.end(), 0);
        rng.shuffle(v);
        std::vector<int> sorted = v;
        std::sort(sorted.begin(), sorted.end());
        for (int i = 0; i < static_cast<int>(sorted.size()); ++i) CHECK(sorted[i] == i);
    }
}

TEST_CASE("derive_seed separates streams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t base = 0; base < 20; ++base)
        for (std::uint64_t stream = 0; stream < 20; ++stream) seen.insert(derive_seed(base, stream));
    CHECK(seen.size() == 400u);
    CHECK(derive_seed(5, 9) == derive_seed(5, 9));
}

TEST_CASE("image helpers") {
    Image a(2, 3, 2, 0.5), b(2, 3, 2, 0.5);
    CHECK(a == b);
    b.at(1, 2, 1) = -0.25;
    CHECK(max_abs_diff(a, b) == doctest::Approx(0.75));
    CHECK(shape_string(a) == "2x3x2");
    CHECK_THROWS_AS(require_same_shape(a, Image(3, 2, 2), "test"), ShapeError);
    CHECK(max_abs(b.data) == doctest::Approx(0.5));
}

TEST_CASE("error hierarchy") {
    CHECK_THROWS_AS(throw NoFaceError("x"), Error);
    TrainingFailure f("low", 0.42);
    CHECK(f.achieved() == 0.42);
}

TEST_CASE("gaussian blur keeps constants and mass") {
    Image img(9, 9, 1, 0.3);
    const Image out = gaussian_blur(img, 1.2);
    CHECK(max_abs_diff(img, out) < 1e-12);
}

TEST_CASE("bilinear resize to the same size is identity") {
    Rng rng(5);
    Image img(7, 5, 3);
    for (auto& x : img.data) x = rng.uniform();
    CHECK(max_abs_diff(resize_bilinear(img, 7, 5), img) < 1e-12);
}

TEST_CASE("clip_unit clamps") {
    Image img(1, 3, 1);
    img.data = {-0.5, 0.5, 1.5};
    clip_unit(img);
    CHECK(img.data == std::vector<double>{0.0, 0.5, 1.0});
}
