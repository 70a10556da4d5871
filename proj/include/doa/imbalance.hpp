#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <string>
#include <vector>

#include "doa/common.hpp"

// Label distribution smoothing over the 101 integer BIS bins and the
// reweighted loss stack built on top of it.
namespace doa::imbalance {

inline constexpr std::size_t kNumBins = 101;  // BIS 0..100 inclusive

inline std::size_t bin_of(double bis) {
  require(bis >= 0.0 && bis <= 100.0, errc::out_of_range_target,
          "BIS target " + std::to_string(bis) + " outside [0, 100]");
  return static_cast<std::size_t>(std::llround(bis));
}

struct LabelDensity {
  std::vector<double> empirical;  // raw counts per bin
  std::vector<double> smoothed;   // kernel-smoothed counts, same total mass
  double kernel_sigma = 2.0;      // bins
  int kernel_radius = 4;          // bins
};

struct WeightTable {
  std::vector<double> w;  // per-bin loss weight, min over occupied bins == 1
  double w_cap = 50.0;

  double weight_for(double bis) const { return w[bin_of(bis)]; }
};

// Empirical counts convolved with a truncated Gaussian. For each source bin
// the kernel is renormalized over the offsets landing inside [0, 100], so the
// smoothed mass equals the empirical mass.
inline LabelDensity smooth_density(const std::vector<double>& targets, double sigma = 2.0,
                                   int radius = 4) {
  require(sigma > 0.0, errc::domain_error, "kernel sigma must be positive");
  require(radius >= 1, errc::domain_error, "kernel radius must be >= 1");
  LabelDensity d;
  d.kernel_sigma = sigma;
  d.kernel_radius = radius;
  d.empirical.assign(kNumBins, 0.0);
  d.smoothed.assign(kNumBins, 0.0);
  for (double t : targets) d.empirical[bin_of(t)] += 1.0;

  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double ksum = 0.0;
  for (int o = -radius; o <= radius; ++o) {
    double v = std::exp(-0.5 * (o / sigma) * (o / sigma));
    kernel[static_cast<std::size_t>(o + radius)] = v;
    ksum += v;
  }
  for (double& v : kernel) v /= ksum;

  for (std::size_t y = 0; y < kNumBins; ++y) {
    if (d.empirical[y] == 0.0) continue;
    int lo = std::max(-radius, -static_cast<int>(y));
    int hi = std::min(radius, static_cast<int>(kNumBins - 1 - y));
    double inside = 0.0;
    for (int o = lo; o <= hi; ++o) inside += kernel[static_cast<std::size_t>(o + radius)];
    for (int o = lo; o <= hi; ++o) {
      double share = kernel[static_cast<std::size_t>(o + radius)] / inside;
      d.smoothed[y + static_cast<std::size_t>(o)] += d.empirical[y] * share;
    }
  }
  return d;
}

// Inverse-density weights: 1/smoothed on occupied bins, rescaled so the
// smallest occupied-bin weight is 1, capped at w_cap. Bins with no smoothed
// mass get the cap.
inline WeightTable weights_from_density(const LabelDensity& d, double w_cap = 50.0) {
  require(w_cap > 0.0, errc::domain_error, "weight cap must be positive");
  double total = 0.0;
  for (double v : d.empirical) total += v;
  require(total > 0.0, errc::empty_density, "no labels in density");

  WeightTable t;
  t.w_cap = w_cap;
  t.w.assign(kNumBins, w_cap);
  double min_raw = 0.0;
  bool seen = false;
  for (std::size_t i = 0; i < kNumBins; ++i) {
    if (d.smoothed[i] > 0.0) {
      double raw = 1.0 / d.smoothed[i];
      if (!seen || raw < min_raw) min_raw = raw;
      seen = true;
    }
  }
  require(seen, errc::empty_density, "smoothed density is all-zero");
  for (std::size_t i = 0; i < kNumBins; ++i) {
    if (d.smoothed[i] > 0.0)
      t.w[i] = std::min(w_cap, (1.0 / d.smoothed[i]) / min_raw);
  }
  return t;
}

// Mean squared error between corrected and true histories over N x T entries.
inline double history_loss(const std::vector<std::vector<double>>& y_hat,
                           const std::vector<std::vector<double>>& y_true) {
  require(y_hat.size() == y_true.size() && !y_hat.empty(), errc::shape_mismatch,
          "history batch sizes differ or empty");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < y_hat.size(); ++i) {
    require(y_hat[i].size() == y_true[i].size() && !y_hat[i].empty(), errc::shape_mismatch,
            "history lengths differ at sample " + std::to_string(i));
    for (std::size_t t = 0; t < y_hat[i].size(); ++t) {
      double e = y_hat[i][t] - y_true[i][t];
      acc += e * e;
    }
    count += y_hat[i].size();
  }
  return acc / static_cast<double>(count);
}

// Weighted MSE on final predictions; weights are looked up by the true
// value's bin.
inline double weighted_mse(const std::vector<double>& pred, const std::vector<double>& truth,
                           const WeightTable& w) {
  require(pred.size() == truth.size() && !pred.empty(), errc::shape_mismatch,
          "prediction/target lengths differ or empty");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double e = pred[i] - truth[i];
    acc += w.weight_for(truth[i]) * e * e;
  }
  return acc / static_cast<double>(pred.size());
}

inline double plain_mse(const std::vector<double>& pred, const std::vector<double>& truth) {
  require(pred.size() == truth.size() && !pred.empty(), errc::shape_mismatch,
          "prediction/target lengths differ or empty");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double e = pred[i] - truth[i];
    acc += e * e;
  }
  return acc / static_cast<double>(pred.size());
}

inline double total_objective(double l_h, double l_w, double lambda_h = 5.0,
                              double lambda_w = 10.0) {
  require(std::isfinite(l_h) && std::isfinite(l_w), errc::non_finite_input,
          "loss component not finite");
  return lambda_h * l_h + lambda_w * l_w;
}

// 101-row CSV (bin, empirical, smoothed, weight) for inspection and plots.
inline std::string weight_table_csv(const LabelDensity& d, const WeightTable& t) {
  std::string out = "bin,empirical,smoothed,weight\n";
  for (std::size_t i = 0; i < kNumBins; ++i) {
    char line[128];
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g\n", i, d.empirical[i],
                  d.smoothed[i], t.w[i]);
    out += line;
  }
  return out;
}

}  // namespace doa::imbalance
