#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "doa/common.hpp"

namespace doa::datapipe {

// Locally weighted linear smoother (tricube weights, single non-robust pass)
// on an equally spaced series. `frac` is the fraction of points in each local
// window.
inline std::vector<double> lowess_smooth(const std::vector<double>& y, double frac = 0.03) {
  require(y.size() >= 3, errc::series_too_short,
          "lowess needs at least 3 points, got " + std::to_string(y.size()));
  require(frac > 0.0 && frac <= 1.0, errc::domain_error, "lowess fraction outside (0, 1]");
  const std::size_t n = y.size();
  std::size_t k = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(n)));
  k = std::clamp<std::size_t>(k, 2, n);

  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    // contiguous window of k nearest indices around i
    std::size_t lo = i >= k - 1 ? i - (k - 1) : 0;
    std::size_t best_lo = lo;
    double best_span = 1e300;
    for (std::size_t cand = lo; cand + k <= n && cand <= i; ++cand) {
      double span = std::max(static_cast<double>(i - cand),
                             static_cast<double>(cand + k - 1 - i));
      if (span < best_span) {
        best_span = span;
        best_lo = cand;
      }
    }
    std::size_t hi = best_lo + k - 1;
    double h = std::max(static_cast<double>(i - best_lo), static_cast<double>(hi - i));

    double sw = 0, sx = 0, sxx = 0, sy = 0, sxy = 0;
    for (std::size_t j = best_lo; j <= hi; ++j) {
      double dx = static_cast<double>(j) - static_cast<double>(i);
      double u = h > 0.0 ? std::abs(dx) / h : 0.0;
      double w = u < 1.0 ? std::pow(1.0 - u * u * u, 3) : 0.0;
      if (w <= 0.0) continue;
      sw += w;
      sx += w * dx;
      sxx += w * dx * dx;
      sy += w * y[j];
      sxy += w * dx * y[j];
    }
    if (sw <= 0.0) {
      out[i] = y[i];
      continue;
    }
    double denom = sw * sxx - sx * sx;
    if (std::abs(denom) < 1e-12 * std::max(1.0, sw * sxx)) {
      out[i] = sy / sw;  // degenerate spread: weighted mean
    } else {
      out[i] = (sxx * sy - sx * sxy) / denom;  // local linear fit at dx == 0
    }
  }
  return out;
}

}  // namespace doa::datapipe
