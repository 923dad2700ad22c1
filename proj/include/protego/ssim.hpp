#pragma once

#include "protego/core.hpp"

namespace protego {

/// Mean structural similarity over all fully-contained 11x11 Gaussian windows
/// (sigma 1.5), averaged across channels. Stabilizers C1 = 0.01^2 and
/// C2 = 0.03^2 assume unit dynamic range.
struct SsimParams {
    static constexpr int window = 11;
    static constexpr double sigma = 1.5;
    static constexpr double c1 = 0.01 * 0.01;
    static constexpr double c2 = 0.03 * 0.03;
};

double ssim(const Image& a, const Image& b);

/// SSIM value plus its gradient with respect to the second argument. The
/// index is symmetric, so swapping arguments yields the other gradient.
double ssim_with_gradient(const Image& a, const Image& b, Image& grad_b);

}  // namespace protego
