#pragma once

#include "protego/core.hpp"

namespace protego {

/// Separable Gaussian blur, kernel radius ceil(3 sigma), edge-replicated.
Image gaussian_blur(const Image& image, double sigma);

/// Bilinear resampling to a new size (pixel-centre aligned, edge-clamped).
Image resize_bilinear(const Image& image, int rows, int cols);

void clip_unit(Image& image);

}  // namespace protego
