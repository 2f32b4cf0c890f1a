#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>

#include "reidlab/image.hpp"

namespace reidlab {

inline void require_same_shape(const Image& a, const Image& b,
                               const char* who) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

inline double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  double acc = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    double d = static_cast<double>(a.v[i]) - b.v[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.v.size());
}

inline double max_abs_residual(const Image& a, const Image& b) {
  require_same_shape(a, b, "max_abs_residual");
  double m = 0.0;
  for (size_t i = 0; i < a.v.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.v[i]) - b.v[i]));
  return m;
}

// Peak signal-to-noise ratio with peak L (1.0 for unit-range rasters).
// Identical images have no noise floor, so report +inf rather than a
// made-up cap.
inline double psnr(const Image& a, const Image& b, double peak = 1.0) {
  double e = mse(a, b);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / e);
}

// Mean SSIM over 8x8 uniform windows with stride 4, per channel, averaged
// over windows and channels. Population moments (divide by 64). Constants
// C1=(0.01 L)^2, C2=(0.03 L)^2.
inline double ssim(const Image& a, const Image& b, double peak = 1.0) {
  require_same_shape(a, b, "ssim");
  const int win = 8, stride = 4;
  if (a.h < win || a.w < win)
    throw std::invalid_argument("ssim: image smaller than 8x8 window");
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const double n = win * win;
  double total = 0.0;
  long count = 0;
  for (int ch = 0; ch < a.c; ++ch) {
    for (int y0 = 0; y0 + win <= a.h; y0 += stride) {
      for (int x0 = 0; x0 + win <= a.w; x0 += stride) {
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (int y = y0; y < y0 + win; ++y)
          for (int x = x0; x < x0 + win; ++x) {
            double px = a.at(y, x, ch);
            double py = b.at(y, x, ch);
            sx += px; sy += py;
            sxx += px * px; syy += py * py; sxy += px * py;
          }
        double mx = sx / n, my = sy / n;
        double vx = sxx / n - mx * mx;
        double vy = syy / n - my * my;
        double cov = sxy / n - mx * my;
        double num = (2 * mx * my + c1) * (2 * cov + c2);
        double den = (mx * mx + my * my + c1) * (vx + vy + c2);
        total += num / den;
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace reidlab
