#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "doa/common.hpp"
#include "doa/datapipe.hpp"
#include "doa/imbalance.hpp"

// Clinical evaluation: per-period MDPE/MDAPE/RMSE, Lin's concordance
// correlation coefficient, per-bin test error, and BIS mutation statistics.
namespace doa::metrics {

// Anesthesia phases anchored to propofol start/stop: induction covers the
// first ten minutes of infusion, maintenance runs to the propofol stop,
// recovery to the end of the record.
struct PeriodSplit {
  int t0 = 0;      // induction start, seconds
  int t_mid = 0;   // maintenance start == t0 + 600
  int t_stop = 0;  // recovery start == propofol stop
  int t_end = 0;   // last labeled second

  bool maintenance_empty() const { return t_stop <= t_mid; }

  // period of second t: 0 induction, 1 maintenance, 2 recovery, -1 unlabeled
  int period_of(int t) const {
    if (t < t0 || t > t_end) return -1;
    if (t < t_mid) return 0;
    if (t < t_stop) return 1;
    return 2;
  }
};

inline const char* period_name(int p) {
  switch (p) {
    case 0: return "induction";
    case 1: return "maintenance";
    case 2: return "recovery";
    default: return "all";
  }
}

inline PeriodSplit split_periods(const datapipe::CaseSeries& cs) {
  require(cs.t_propofol_stop >= cs.t_induction_start && cs.t_end >= cs.t_propofol_stop,
          errc::missing_anchor, "case anchors out of order for " + cs.case_id);
  require(!cs.bis.empty(), errc::missing_anchor, "case without labels");
  PeriodSplit ps;
  ps.t0 = cs.t_induction_start;
  ps.t_mid = cs.t_induction_start + 600;
  ps.t_stop = cs.t_propofol_stop;
  ps.t_end = cs.t_end;
  return ps;
}

struct PeriodMetrics {
  double mdpe = 0.0;   // percent
  double mdape = 0.0;  // percent
  double rmse = 0.0;   // BIS units
  std::size_t n = 0;
};

struct CaseMetrics {
  PeriodMetrics all;
  PeriodMetrics induction;
  PeriodMetrics maintenance;
  PeriodMetrics recovery;
};

namespace detail {

inline double median(std::vector<double> v) {
  std::size_t n = v.size();
  std::sort(v.begin(), v.end());
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline PeriodMetrics metrics_of(const std::vector<double>& pe, const std::vector<double>& se) {
  PeriodMetrics m;
  m.n = pe.size();
  if (pe.empty()) return m;
  m.mdpe = median(pe);
  std::vector<double> ape(pe.size());
  for (std::size_t i = 0; i < pe.size(); ++i) ape[i] = std::abs(pe[i]);
  m.mdape = median(ape);
  double acc = 0.0;
  for (double s : se) acc += s;
  m.rmse = std::sqrt(acc / static_cast<double>(se.size()));
  return m;
}

}  // namespace detail

// Performance error PE = 100 * (pred - true) / true, aggregated per period.
// `seconds` carries the absolute time of each series entry; when null the
// entry index is the second. True values must be positive wherever a PE is
// computed.
inline CaseMetrics case_metrics(const std::vector<double>& pred,
                                const std::vector<double>& truth, const PeriodSplit& split,
                                const std::vector<int>* seconds = nullptr) {
  require(pred.size() == truth.size() && !pred.empty(), errc::shape_mismatch,
          "prediction/target series must align");
  require(seconds == nullptr || seconds->size() == pred.size(), errc::shape_mismatch,
          "seconds vector must align with the series");
  std::vector<double> pe[4], se[4];
  for (std::size_t i = 0; i < pred.size(); ++i) {
    int t = seconds ? (*seconds)[i] : static_cast<int>(i);
    int p = split.period_of(t);
    if (p < 0) continue;
    require(truth[i] > 0.0, errc::zero_true_value,
            "true BIS must be positive at t=" + std::to_string(t));
    double err = pred[i] - truth[i];
    double perc = 100.0 * err / truth[i];
    pe[3].push_back(perc);
    se[3].push_back(err * err);
    pe[p].push_back(perc);
    se[p].push_back(err * err);
  }
  require(!pe[3].empty(), errc::shape_mismatch, "no labeled seconds in the period split");
  CaseMetrics cm;
  cm.all = detail::metrics_of(pe[3], se[3]);
  cm.induction = detail::metrics_of(pe[0], se[0]);
  cm.maintenance = detail::metrics_of(pe[1], se[1]);
  cm.recovery = detail::metrics_of(pe[2], se[2]);
  return cm;
}

// Lin's concordance correlation coefficient with a Fisher-z 95% confidence
// interval (normal quantile 1.959964, SE = 1/sqrt(n-3)).
struct CccResult {
  double ccc = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 0.0;
};

inline CccResult ccc(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 3, errc::degenerate_series,
          "ccc needs aligned series of length >= 3");
  std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double vx = 0.0, vy = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
    cov += (x[i] - mx) * (y[i] - my);
  }
  vx /= static_cast<double>(n);  // population moments
  vy /= static_cast<double>(n);
  cov /= static_cast<double>(n);
  require(vx > 0.0 && vy > 0.0, errc::degenerate_series, "ccc needs nonzero variance");

  CccResult r;
  r.ccc = 2.0 * cov / (vx + vy + (mx - my) * (mx - my));
  double clipped = std::clamp(r.ccc, -0.999999999999, 0.999999999999);
  double z = 0.5 * std::log((1.0 + clipped) / (1.0 - clipped));
  double se = 1.0 / std::sqrt(static_cast<double>(n - 3));
  const double q = 1.959964;
  r.ci_lower = std::tanh(z - q * se);
  r.ci_upper = std::tanh(z + q * se);
  return r;
}

// Bootstrap CI cross-check (percentile method, seeded resampling).
inline CccResult ccc_bootstrap(const std::vector<double>& x, const std::vector<double>& y,
                               std::size_t n_boot, std::uint64_t seed) {
  CccResult base = ccc(x, y);
  Rng rng(seed);
  std::vector<double> stats;
  stats.reserve(n_boot);
  std::vector<double> bx(x.size()), by(y.size());
  for (std::size_t b = 0; b < n_boot; ++b) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto j = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(x.size()) - 1));
      bx[i] = x[j];
      by[i] = y[j];
    }
    try {
      stats.push_back(ccc(bx, by).ccc);
    } catch (const Error&) {
      // degenerate resample; skip
    }
  }
  require(stats.size() >= 10, errc::degenerate_series, "too few valid bootstrap resamples");
  std::sort(stats.begin(), stats.end());
  base.ci_lower = stats[static_cast<std::size_t>(0.025 * static_cast<double>(stats.size()))];
  base.ci_upper = stats[std::min(stats.size() - 1, static_cast<std::size_t>(
                                                       0.975 * static_cast<double>(stats.size())))];
  return base;
}

// Signed per-bin test error: |sum of (pred - true)| / n over the points whose
// rounded true value lands in bin j. Bins with no points are absent.
inline std::map<int, double> binned_test_error(const std::vector<double>& pred,
                                               const std::vector<double>& truth) {
  require(pred.size() == truth.size(), errc::shape_mismatch, "series must align");
  std::map<int, double> sums;
  std::map<int, std::size_t> counts;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    int bin = static_cast<int>(imbalance::bin_of(truth[i]));
    sums[bin] += pred[i] - truth[i];
    counts[bin] += 1;
  }
  std::map<int, double> out;
  for (const auto& [bin, s] : sums)
    out[bin] = std::abs(s) / static_cast<double>(counts[bin]);
  return out;
}

// BIS mutation statistics over a maintenance-period series. A point is a
// mutation when it sits more than `m` BIS units from the window minimum or
// maximum over (t-30, t+30) seconds. Fractions are reported per label region.
struct MutationStats {
  std::size_t total_mutations = 0;
  // regions: below-31, many [31,48), medium [48,54), medium [54,64), few >= 64
  std::array<double, 5> region_fraction{};
  std::array<std::size_t, 5> region_count{};
};

inline int mutation_region(double bis) {
  if (bis < 31.0) return 0;
  if (bis < 48.0) return 1;
  if (bis < 54.0) return 2;
  if (bis < 64.0) return 3;
  return 4;
}

inline MutationStats mutation_stats(const std::vector<double>& bis, double m,
                                    int half_window_s = 30) {
  require(m > 0.0, errc::domain_error, "mutation magnitude must be positive");
  require(static_cast<int>(bis.size()) > half_window_s, errc::window_exceeds_series,
          "series shorter than the mutation window");
  MutationStats st;
  int n = static_cast<int>(bis.size());
  for (int t = 0; t < n; ++t) {
    int lo = std::max(0, t - half_window_s + 1);      // open interval (t-30, t+30)
    int hi = std::min(n - 1, t + half_window_s - 1);
    double wmin = bis[static_cast<std::size_t>(lo)], wmax = wmin;
    for (int j = lo + 1; j <= hi; ++j) {
      wmin = std::min(wmin, bis[static_cast<std::size_t>(j)]);
      wmax = std::max(wmax, bis[static_cast<std::size_t>(j)]);
    }
    double b = bis[static_cast<std::size_t>(t)];
    if (std::abs(b - wmin) > m || std::abs(b - wmax) > m) {
      ++st.total_mutations;
      ++st.region_count[static_cast<std::size_t>(mutation_region(b))];
    }
  }
  if (st.total_mutations > 0)
    for (std::size_t r = 0; r < st.region_count.size(); ++r)
      st.region_fraction[r] =
          static_cast<double>(st.region_count[r]) / static_cast<double>(st.total_mutations);
  return st;
}

// Cohort aggregation: mean and SD over per-case values.
struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
  std::size_t n = 0;
};

inline MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd r;
  r.n = v.size();
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double acc = 0.0;
    for (double x : v) acc += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(acc / static_cast<double>(v.size() - 1));
  }
  return r;
}

}  // namespace doa::metrics
