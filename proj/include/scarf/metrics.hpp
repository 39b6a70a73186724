#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "scarf/image.hpp"

namespace scarf {

/// Returned by psnr() for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

double mse(const Image& a, const Image& b);

/// 10 log10(1 / MSE) over all channels, for values in [0, 1].
double psnr(const Image& a, const Image& b);

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2, averaged over valid window positions and channels.
double ssim(const Image& a, const Image& b);

struct MetricReport {
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t pixel_count = 0;
};

MetricReport compare_images(const Image& a, const Image& b);

}  // namespace scarf
