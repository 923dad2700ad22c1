#include "protego/ssim.hpp"

#include <array>
#include <cmath>

namespace protego {
namespace {

constexpr int kWin = SsimParams::window;

std::array<double, kWin> gaussian_kernel() {
    std::array<double, kWin> g{};
    double total = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - kWin / 2;
        g[i] = std::exp(-d * d / (2.0 * SsimParams::sigma * SsimParams::sigma));
        total += g[i];
    }
    for (auto& x : g) x /= total;
    return g;
}

/// Plane of one channel, row-major.
struct Plane {
    int rows = 0, cols = 0;
    std::vector<double> v;
    Plane(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

// Separable "valid" filtering: output (rows - 10) x (cols - 10).
Plane valid_filter(const Plane& in, const std::array<double, kWin>& g) {
    Plane tmp(in.rows, in.cols - kWin + 1);
    for (int r = 0; r < tmp.rows; ++r)
        for (int c = 0; c < tmp.cols; ++c) {
            double acc = 0.0;
            for (int k = 0; k < kWin; ++k) acc += g[k] * in.at(r, c + k);
            tmp.at(r, c) = acc;
        }
    Plane out(in.rows - kWin + 1, tmp.cols);
    for (int r = 0; r < out.rows; ++r)
        for (int c = 0; c < out.cols; ++c) {
            double acc = 0.0;
            for (int k = 0; k < kWin; ++k) acc += g[k] * tmp.at(r + k, c);
            out.at(r, c) = acc;
        }
    return out;
}

// Adjoint of valid_filter: scatters a window-grid map back to pixel space.
Plane valid_filter_adjoint(const Plane& grid, const std::array<double, kWin>& g, int rows, int cols) {
    Plane tmp(rows, grid.cols);
    for (int r = 0; r < grid.rows; ++r)
        for (int c = 0; c < grid.cols; ++c)
            for (int k = 0; k < kWin; ++k) tmp.at(r + k, c) += g[k] * grid.at(r, c);
    Plane out(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < grid.cols; ++c)
            for (int k = 0; k < kWin; ++k) out.at(r, c + k) += g[k] * tmp.at(r, c);
    return out;
}

Plane channel(const Image& img, int ch) {
    Plane p(img.rows, img.cols);
    for (int r = 0; r < img.rows; ++r)
        for (int c = 0; c < img.cols; ++c) p.at(r, c) = img.at(r, c, ch);
    return p;
}

Plane product(const Plane& a, const Plane& b) {
    Plane out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
    return out;
}

double ssim_impl(const Image& a, const Image& b, Image* grad_b) {
    require_same_shape(a, b, "ssim");
    if (a.rows < kWin || a.cols < kWin)
        throw ShapeError("ssim: images must be at least 11x11, got " + shape_string(a));
    const auto g = gaussian_kernel();
    const double c1 = SsimParams::c1, c2 = SsimParams::c2;
    const int gr = a.rows - kWin + 1, gc = a.cols - kWin + 1;
    const double norm = 1.0 / (static_cast<double>(gr) * gc * a.channels);

    if (grad_b) *grad_b = Image(a.rows, a.cols, a.channels);
    double total = 0.0;
    for (int ch = 0; ch < a.channels; ++ch) {
        const Plane pa = channel(a, ch), pb = channel(b, ch);
        const Plane mu_a = valid_filter(pa, g), mu_b = valid_filter(pb, g);
        const Plane s_aa = valid_filter(product(pa, pa), g);
        const Plane s_bb = valid_filter(product(pb, pb), g);
        const Plane s_ab = valid_filter(product(pa, pb), g);

        Plane d_mu(gr, gc), d_sbb(gr, gc), d_sab(gr, gc);
        for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
            const double ma = mu_a.v[i], mb = mu_b.v[i];
            const double var_a = s_aa.v[i] - ma * ma;
            const double var_b = s_bb.v[i] - mb * mb;
            const double cov = s_ab.v[i] - ma * mb;
            const double A1 = 2 * ma * mb + c1, A2 = 2 * cov + c2;
            const double B1 = ma * ma + mb * mb + c1, B2 = var_a + var_b + c2;
            const double N = A1 * A2, D = B1 * B2;
            total += N / D;
            if (grad_b) {
                const double dN = 2 * ma * A2 - 2 * ma * A1;
                const double dD = 2 * mb * B2 - 2 * mb * B1;
                d_mu.v[i] = norm * (dN * D - N * dD) / (D * D);
                d_sab.v[i] = norm * 2 * A1 / D;
                d_sbb.v[i] = norm * (-N * B1) / (D * D);
            }
        }
        if (grad_b) {
            const Plane g_mu = valid_filter_adjoint(d_mu, g, a.rows, a.cols);
            const Plane g_bb = valid_filter_adjoint(d_sbb, g, a.rows, a.cols);
            const Plane g_ab = valid_filter_adjoint(d_sab, g, a.rows, a.cols);
            for (int r = 0; r < a.rows; ++r)
                for (int c = 0; c < a.cols; ++c)
                    grad_b->at(r, c, ch) = g_mu.at(r, c) + 2 * pb.at(r, c) * g_bb.at(r, c) + pa.at(r, c) * g_ab.at(r, c);
        }
    }
    return total * norm;
}

}  // namespace

double ssim(const Image& a, const Image& b) { return ssim_impl(a, b, nullptr); }

double ssim_with_gradient(const Image& a, const Image& b, Image& grad_b) { return ssim_impl(a, b, &grad_b); }

}  // namespace protego
