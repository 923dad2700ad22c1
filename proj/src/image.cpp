#include "protego/core.hpp"
#include "protego/image_ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace protego {

std::string shape_string(const Image& img) {
    return std::to_string(img.rows) + "x" + std::to_string(img.cols) + "x" +
           std::to_string(img.channels);
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) +
                         " vs " + shape_string(b));
    }
}

double max_abs(std::span<const double> values) {
    double m = 0.0;
    for (double v : values) m = std::max(m, std::abs(v));
    return m;
}

double max_abs_diff(const Image& a, const Image& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

std::size_t Rng::index(std::size_t n) {
    if (n == 0) throw ConfigError("Rng::index on empty range");
    // Rejection sampling keeps the mapping unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % n);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

Image gaussian_blur(const Image& image, double sigma) {
    if (!(sigma > 0.0)) throw ConfigError("gaussian_blur: sigma must be > 0");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> w(2 * radius + 1);
    double total = 0.0;
    for (int k = -radius; k <= radius; ++k) {
        w[k + radius] = std::exp(-(k * k) / (2.0 * sigma * sigma));
        total += w[k + radius];
    }
    for (auto& x : w) x /= total;

    Image tmp(image.rows, image.cols, image.channels);
    for (int r = 0; r < image.rows; ++r)
        for (int c = 0; c < image.cols; ++c)
            for (int ch = 0; ch < image.channels; ++ch) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const int cc = std::clamp(c + k, 0, image.cols - 1);
                    acc += w[k + radius] * image.at(r, cc, ch);
                }
                tmp.at(r, c, ch) = acc;
            }
    Image out(image.rows, image.cols, image.channels);
    for (int r = 0; r < image.rows; ++r)
        for (int c = 0; c < image.cols; ++c)
            for (int ch = 0; ch < image.channels; ++ch) {
                double acc = 0.0;
                for (int k = -radius; k <= radius; ++k) {
                    const int rr = std::clamp(r + k, 0, image.rows - 1);
                    acc += w[k + radius] * tmp.at(rr, c, ch);
                }
                out.at(r, c, ch) = acc;
            }
    return out;
}

Image resize_bilinear(const Image& image, int rows, int cols) {
    if (rows < 1 || cols < 1) throw ConfigError("resize_bilinear: target size must be positive");
    Image out(rows, cols, image.channels);
    const double sy = static_cast<double>(image.rows) / rows;
    const double sx = static_cast<double>(image.cols) / cols;
    for (int r = 0; r < rows; ++r) {
        const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, image.rows - 1.0);
        const int y0 = std::min(static_cast<int>(y), image.rows - 1);
        const int y1 = std::min(y0 + 1, image.rows - 1);
        const double fy = y - y0;
        for (int c = 0; c < cols; ++c) {
            const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, image.cols - 1.0);
            const int x0 = std::min(static_cast<int>(x), image.cols - 1);
            const int x1 = std::min(x0 + 1, image.cols - 1);
            const double fx = x - x0;
            for (int ch = 0; ch < image.channels; ++ch) {
                const double top = (1 - fx) * image.at(y0, x0, ch) + fx * image.at(y0, x1, ch);
                const double bot = (1 - fx) * image.at(y1, x0, ch) + fx * image.at(y1, x1, ch);
                out.at(r, c, ch) = (1 - fy) * top + fy * bot;
            }
        }
    }
    return out;
}

void clip_unit(Image& image) {
    for (auto& x : image.data) x = std::clamp(x, 0.0, 1.0);
}

}  // namespace protego
