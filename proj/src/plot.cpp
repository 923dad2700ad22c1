#include "protego/plot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "protego/io.hpp"

namespace protego::plot {
namespace {

constexpr int kMargin = 24;

struct Range {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    void add(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    void finish() {
        if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
        if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    }
};

void put(Image& img, int r, int c, const std::vector<double>& colour) {
    if (r < 0 || c < 0 || r >= img.rows || c >= img.cols) return;
    for (int k = 0; k < img.channels; ++k) img.at(r, c, k) = colour[k];
}

void line(Image& img, double r0, double c0, double r1, double c1, const std::vector<double>& colour) {
    const int steps = static_cast<int>(std::ceil(std::max(std::abs(r1 - r0), std::abs(c1 - c0)))) + 1;
    for (int s = 0; s <= steps; ++s) {
        const double t = static_cast<double>(s) / steps;
        put(img, static_cast<int>(std::lround(r0 + t * (r1 - r0))), static_cast<int>(std::lround(c0 + t * (c1 - c0))),
            colour);
    }
}

void axes(Image& img) {
    const std::vector<double> black{0.0, 0.0, 0.0};
    line(img, img.rows - kMargin, kMargin, img.rows - kMargin, img.cols - kMargin, black);
    line(img, kMargin, kMargin, img.rows - kMargin, kMargin, black);
}

}  // namespace

std::vector<double> palette(std::size_t index) {
    static const double colours[][3] = {{0.12, 0.47, 0.71}, {1.0, 0.5, 0.05}, {0.17, 0.63, 0.17},
                                        {0.84, 0.15, 0.16}, {0.58, 0.4, 0.74}, {0.55, 0.34, 0.29}};
    const auto& c = colours[index % 6];
    return {c[0], c[1], c[2]};
}

Image line_chart(const std::vector<Series>& series, int width, int height) {
    Image img(height, width, 3, 1.0);
    Range xr, yr;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw ShapeError("line_chart: x and y differ in length for '" + s.label + "'");
        for (double v : s.x) xr.add(v);
        for (double v : s.y) yr.add(v);
    }
    xr.finish();
    yr.finish();
    axes(img);
    const double pw = width - 2.0 * kMargin, ph = height - 2.0 * kMargin;
    auto col = [&](double x) { return kMargin + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
    auto row = [&](double y) { return height - kMargin - (y - yr.lo) / (yr.hi - yr.lo) * ph; };
    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto colour = palette(i);
        const auto& s = series[i];
        for (std::size_t k = 0; k + 1 < s.x.size(); ++k) {
            if (!std::isfinite(s.y[k]) || !std::isfinite(s.y[k + 1])) continue;
            line(img, row(s.y[k]), col(s.x[k]), row(s.y[k + 1]), col(s.x[k + 1]), colour);
        }
        if (s.x.size() == 1 && std::isfinite(s.y[0]))
            put(img, static_cast<int>(row(s.y[0])), static_cast<int>(col(s.x[0])), colour);
    }
    return img;
}

Image bar_chart(const std::vector<double>& values, int width, int height) {
    Image img(height, width, 3, 1.0);
    Range yr;
    yr.add(0.0);
    for (double v : values) yr.add(v);
    yr.finish();
    axes(img);
    if (values.empty()) return img;
    const double pw = width - 2.0 * kMargin, ph = height - 2.0 * kMargin;
    const double slot = pw / static_cast<double>(values.size());
    const double zero = height - kMargin - (0.0 - yr.lo) / (yr.hi - yr.lo) * ph;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) continue;
        const double top = height - kMargin - (values[i] - yr.lo) / (yr.hi - yr.lo) * ph;
        const int c0 = static_cast<int>(kMargin + i * slot + 0.15 * slot);
        const int c1 = static_cast<int>(kMargin + (i + 1) * slot - 0.15 * slot);
        const int r0 = static_cast<int>(std::lround(std::min(top, zero)));
        const int r1 = static_cast<int>(std::lround(std::max(top, zero)));
        for (int r = r0; r <= r1; ++r)
            for (int c = c0; c <= c1; ++c) put(img, r, c, palette(i));
    }
    return img;
}

void write_line_chart(const std::filesystem::path& path, const std::vector<Series>& series) {
    io::write_png(path, line_chart(series));
}

void write_bar_chart(const std::filesystem::path& path, const std::vector<double>& values) {
    io::write_png(path, bar_chart(values));
}

}  // namespace protego::plot
