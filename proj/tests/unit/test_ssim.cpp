#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "oracles.hpp"
#include "protego/ssim.hpp"

using namespace protego;
using testing::random_image;

using oracle::ssim_literal;

TEST_CASE("ssim matches the definition-literal computation") {
    Rng rng(10);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const int rows = 11 + static_cast<int>(rng.index(10)), cols = 11 + static_cast<int>(rng.index(10));
        const Image a = random_image(rows, cols, 1 + static_cast<int>(rng.index(3)), rng);
        Image b = a;
        const double noise = rng.uniform(0.0, 0.5);
        for (auto& x : b.data) x = std::clamp(x + noise * rng.uniform(-1.0, 1.0), 0.0, 1.0);
        worst = std::max(worst, std::abs(ssim(a, b) - ssim_literal(a, b)));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("ssim identity and inversion") {
    Rng rng(3);
    const Image x = random_image(24, 24, 3, rng);
    CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    Image bin(24, 24, 1);
    for (auto& v : bin.data) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    Image inv = bin;
    for (auto& v : inv.data) v = 1.0 - v;
    CHECK(ssim(bin, inv) < 0.5);
}

TEST_CASE("ssim errors") {
    CHECK_THROWS_AS(ssim(Image(12, 12, 1), Image(12, 13, 1)), ShapeError);
    CHECK_THROWS_AS(ssim(Image(8, 8, 1), Image(8, 8, 1)), ShapeError);
}

TEST_CASE("ssim gradient matches central differences and is symmetric in value") {
    Rng rng(6);
    const Image a = random_image(14, 13, 2, rng);
    Image b = a;
    for (auto& x : b.data) x = std::clamp(x + 0.2 * rng.uniform(-1.0, 1.0), 0.0, 1.0);
    Image grad;
    const double v = ssim_with_gradient(a, b, grad);
    CHECK(v == doctest::Approx(ssim(a, b)).epsilon(1e-14));
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-14));
    const double h = 1e-5;
    for (int probe = 0; probe < 30; ++probe) {
        const std::size_t i = rng.index(b.size());
        Image bp = b, bm = b;
        bp.data[i] += h;
        bm.data[i] -= h;
        const double fd = (ssim(a, bp) - ssim(a, bm)) / (2 * h);
        CHECK(std::abs(grad.data[i] - fd) <= 1e-6 + 1e-4 * std::abs(fd));
    }
}
