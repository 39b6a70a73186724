#include "scarf/metrics.hpp"

#include <cmath>
#include <string>

#include "scarf/errors.hpp"

namespace scarf {

namespace {

void check_same_size(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height || a.rgb.size() != b.rgb.size())
    throw DimensionError("image sizes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                         std::to_string(b.width) + "x" + std::to_string(b.height));
}

constexpr int kWindow = 11;

std::vector<double> gaussian_window() {
  std::vector<double> w(kWindow * kWindow);
  double total = 0.0;
  for (int y = 0; y < kWindow; ++y)
    for (int x = 0; x < kWindow; ++x) {
      const double dx = x - kWindow / 2, dy = y - kWindow / 2;
      w[y * kWindow + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
      total += w[y * kWindow + x];
    }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace

double mse(const Image& a, const Image& b) {
  check_same_size(a, b);
  if (a.rgb.empty()) throw DimensionError("cannot compare empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < a.rgb.size(); ++i) {
    const double d = a.rgb[i] - b.rgb[i];
    s += d * d;
  }
  return s / static_cast<double>(a.rgb.size());
}

double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m == 0.0) return kPsnrIdentical;
  return -10.0 * std::log10(m);
}

double ssim(const Image& a, const Image& b) {
  check_same_size(a, b);
  if (a.width < kWindow || a.height < kWindow)
    throw DimensionError("ssim needs images of at least 11x11, got " + std::to_string(a.width) + "x" +
                         std::to_string(a.height));
  static const std::vector<double> w = gaussian_window();
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const std::size_t W = a.width;
  const std::size_t ox = a.width - kWindow + 1, oy = a.height - kWindow + 1;
  double total = 0.0;
  for (int ch = 0; ch < 3; ++ch)
    for (std::size_t y0 = 0; y0 < oy; ++y0)
      for (std::size_t x0 = 0; x0 < ox; ++x0) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int y = 0; y < kWindow; ++y)
          for (int x = 0; x < kWindow; ++x) {
            const std::size_t idx = 3 * ((y0 + y) * W + x0 + x) + ch;
            const double g = w[y * kWindow + x], va = a.rgb[idx], vb = b.rgb[idx];
            ma += g * va;
            mb += g * vb;
            saa += g * va * va;
            sbb += g * vb * vb;
            sab += g * va * vb;
          }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      }
  return total / (3.0 * static_cast<double>(ox * oy));
}

MetricReport compare_images(const Image& a, const Image& b) {
  return {psnr(a, b), ssim(a, b), a.pixel_count()};
}

}  // namespace scarf
