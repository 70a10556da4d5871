#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "doa/common.hpp"
#include "doa/datapipe.hpp"
#include "doa/imbalance.hpp"
#include "doa/metrics.hpp"
#include "doa/nn.hpp"
#include "doa/train.hpp"

// End-to-end stages shared by the command-line tool and the integration
// suite: ingest raw case files into a dataset, produce predictions (model and
// PK-PD baseline), and emit evaluation reports.
namespace doa::pipeline {

namespace fs = std::filesystem;

// Bounded worker pool over [0, n); results must be slot-independent.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, jobs);
  if (jobs == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (std::size_t w = 0; w < std::min(jobs, n); ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    require(os.good(), errc::io_error, "cannot write " + tmp.string());
    os << text;
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

struct IngestOptions {
  double train_frac = 0.7, val_frac = 0.15, test_frac = 0.15;
  std::uint64_t seed = 42;
  double lowess_frac = 0.03;
  double kernel_sigma = 2.0;
  int kernel_radius = 4;
  double weight_cap = 50.0;
  std::size_t jobs = 1;

  void validate() const {
    double s = train_frac + val_frac + test_frac;
    require(std::abs(s - 1.0) < 1e-9, errc::config_error,
            "split fractions must sum to 1, got " + std::to_string(s));
    require(train_frac > 0.0, errc::config_error, "training fraction must be positive");
  }
};

struct IngestReport {
  std::size_t accepted = 0;
  std::vector<datapipe::CaseRejection> rejected;
};

// Parses every *.csv under `dir`, cleans and bins the survivors, attaches
// PK-PD pseudo-histories, splits by case, smooths training labels, and
// derives normalization plus the loss-weight table from the training split.
inline IngestReport ingest_directory(const fs::path& dir, const IngestOptions& opt,
                                     datapipe::Dataset& out) {
  opt.validate();
  std::vector<fs::path> files;
  require(fs::exists(dir), errc::io_error, "no such data directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  require(!files.empty(), errc::io_error, "no .csv case files in " + dir.string());

  IngestReport report;
  std::vector<std::optional<datapipe::CaseSeries>> parsed(files.size());
  std::vector<std::optional<datapipe::CaseRejection>> rejects(files.size());
  parallel_for(files.size(), opt.jobs, [&](std::size_t i) {
    auto res = datapipe::parse_and_clean_file(files[i]);
    if (std::holds_alternative<datapipe::CaseRejection>(res)) {
      rejects[i] = std::get<datapipe::CaseRejection>(res);
      return;
    }
    datapipe::CaseSeries cs = datapipe::bin_case(std::get<datapipe::RawCase>(res));
    cs.pseudo_bis = datapipe::pkpd_pseudo_bis(cs);
    parsed[i] = std::move(cs);
  });
  out.cases.clear();
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (rejects[i]) {
      report.rejected.push_back(*rejects[i]);
    } else if (parsed[i]) {
      out.cases.push_back(std::move(*parsed[i]));
    }
  }
  report.accepted = out.cases.size();
  require(!out.cases.empty(), errc::empty_case, "every case was rejected");

  // seeded split by case id
  std::vector<std::string> ids;
  for (const auto& cs : out.cases) ids.push_back(cs.case_id);
  Rng rng(opt.seed ^ 0x73706c6974ULL);
  rng.shuffle(ids);
  std::size_t n = ids.size();
  auto n_train = static_cast<std::size_t>(std::llround(opt.train_frac * static_cast<double>(n)));
  auto n_val = static_cast<std::size_t>(std::llround(opt.val_frac * static_cast<double>(n)));
  n_train = std::max<std::size_t>(1, std::min(n_train, n));
  if (n_train + n_val > n) n_val = n - n_train;
  out.split_train.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
  out.split_val.assign(ids.begin() + static_cast<long>(n_train),
                       ids.begin() + static_cast<long>(n_train + n_val));
  out.split_test.assign(ids.begin() + static_cast<long>(n_train + n_val), ids.end());

  // training labels are LOWESS-smoothed; validation and test stay raw
  for (const std::string& id : out.split_train) {
    auto& cs = out.cases[static_cast<std::size_t>(out.case_index_of(id))];
    cs.bis_label = datapipe::lowess_smooth(cs.bis, opt.lowess_frac);
    for (double& v : cs.bis_label) v = std::clamp(v, 0.0, 100.0);
  }

  out.norms = datapipe::compute_normalization(out);
  std::vector<double> targets;
  for (const auto& ref : out.samples_for("train"))
    targets.push_back(out.cases[ref.case_index].bis_label[ref.t + 1]);
  out.density = imbalance::smooth_density(targets, opt.kernel_sigma, opt.kernel_radius);
  out.weights = imbalance::weights_from_density(out.density, opt.weight_cap);
  return report;
}

// JSON sidecar with normalization constants and split manifests.
inline std::string dataset_sidecar_json(const datapipe::Dataset& ds) {
  std::ostringstream os;
  os.precision(17);
  auto ids = [&](const std::vector<std::string>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ",\"" : "\"") + v[i] + "\"";
    return s + "]";
  };
  os << "{\n  \"normalization\": {\n";
  os << "    \"ppf_rate\": {\"mean\": " << ds.norms.ppf_mean << ", \"scale\": "
     << ds.norms.ppf_scale << "},\n";
  os << "    \"rftn_rate\": {\"mean\": " << ds.norms.rftn_mean << ", \"scale\": "
     << ds.norms.rftn_scale << "},\n";
  os << "    \"bis\": {\"mean\": " << ds.norms.bis_mean << ", \"scale\": " << ds.norms.bis_scale
     << "},\n";
  os << "    \"statics\": {\"mean\": [";
  for (int i = 0; i < 4; ++i) os << (i ? ", " : "") << ds.norms.static_mean[i];
  os << "], \"scale\": [";
  for (int i = 0; i < 4; ++i) os << (i ? ", " : "") << ds.norms.static_scale[i];
  os << "]}\n  },\n";
  os << "  \"splits\": {\n    \"train\": " << ids(ds.split_train)
     << ",\n    \"val\": " << ids(ds.split_val) << ",\n    \"test\": " << ids(ds.split_test)
     << "\n  }\n}\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// predictions
// ---------------------------------------------------------------------------

struct CasePredictions {
  std::string case_id;
  std::vector<int> seconds;      // target second of each row
  std::vector<double> truth;     // raw BIS at that second
  std::vector<double> predicted;
};

inline std::string predictions_csv(const CasePredictions& cp) {
  std::string out = "# case_id=" + cp.case_id + "\nt,true_bis,pred_bis\n";
  char buf[96];
  for (std::size_t i = 0; i < cp.seconds.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", cp.seconds[i], cp.truth[i],
                  cp.predicted[i]);
    out += buf;
  }
  return out;
}

inline CasePredictions read_predictions_csv(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), errc::io_error, "cannot open " + path.string());
  CasePredictions cp;
  cp.case_id = path.stem().string();
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      auto eq = line.find("case_id=");
      if (eq != std::string::npos) cp.case_id = line.substr(eq + 8);
      continue;
    }
    if (line.rfind("t,", 0) == 0) continue;  // header
    int t;
    double tr, pr;
    require(std::sscanf(line.c_str(), "%d,%lf,%lf", &t, &tr, &pr) == 3, errc::io_error,
            "bad prediction row in " + path.string());
    cp.seconds.push_back(t);
    cp.truth.push_back(tr);
    cp.predicted.push_back(pr);
  }
  require(!cp.seconds.empty(), errc::io_error, "no rows in " + path.string());
  return cp;
}

// Model predictions for every sample second of a case. Truth is the raw
// (unsmoothed) BIS series.
inline CasePredictions predict_case(const nn::TrainedModel& model,
                                    const datapipe::Dataset& ds, std::size_t case_index,
                                    std::uint32_t stride = 1) {
  const auto& cs = ds.cases[case_index];
  CasePredictions cp;
  cp.case_id = cs.case_id;
  std::vector<datapipe::SampleRef> refs;
  for (std::uint32_t t = 0; t + 1 < cs.bis.size(); t += stride)
    refs.push_back({static_cast<std::uint32_t>(case_index), t});
  auto preds = nn::predict(model, ds, refs);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    int target_t = static_cast<int>(refs[i].t) + 1;
    cp.seconds.push_back(target_t);
    cp.truth.push_back(cs.bis[static_cast<std::size_t>(target_t)]);
    cp.predicted.push_back(preds[i]);
  }
  return cp;
}

// Fixed-parameter PK-PD baseline: the pseudo-BIS of the bin covering each
// target second.
inline CasePredictions baseline_case(const datapipe::Dataset& ds, std::size_t case_index,
                                     std::uint32_t stride = 1) {
  const auto& cs = ds.cases[case_index];
  CasePredictions cp;
  cp.case_id = cs.case_id;
  for (std::uint32_t t = 0; t + 1 < cs.bis.size(); t += stride) {
    int target_t = static_cast<int>(t) + 1;
    std::size_t bin = std::min(cs.pseudo_bis.size() - 1,
                               static_cast<std::size_t>(target_t) / datapipe::kBinSeconds);
    cp.seconds.push_back(target_t);
    cp.truth.push_back(cs.bis[static_cast<std::size_t>(target_t)]);
    cp.predicted.push_back(cs.pseudo_bis[bin]);
  }
  return cp;
}

// ---------------------------------------------------------------------------
// evaluation reports
// ---------------------------------------------------------------------------

struct MethodEvaluation {
  std::string method;
  std::vector<std::string> case_ids;
  std::vector<metrics::CaseMetrics> per_case;
  metrics::CccResult ccc;
  std::map<int, double> binned_error;
  std::map<int, std::size_t> binned_count;
};

inline MethodEvaluation evaluate_method(const std::string& method,
                                        const std::vector<CasePredictions>& preds,
                                        const datapipe::Dataset& ds) {
  MethodEvaluation ev;
  ev.method = method;
  std::vector<double> all_pred, all_true;
  for (const auto& cp : preds) {
    int ci = ds.case_index_of(cp.case_id);
    require(ci >= 0, errc::config_error,
            "predictions reference unknown case " + cp.case_id);
    const auto& cs = ds.cases[static_cast<std::size_t>(ci)];
    metrics::PeriodSplit split = metrics::split_periods(cs);
    ev.case_ids.push_back(cp.case_id);
    ev.per_case.push_back(metrics::case_metrics(cp.predicted, cp.truth, split, &cp.seconds));
    all_pred.insert(all_pred.end(), cp.predicted.begin(), cp.predicted.end());
    all_true.insert(all_true.end(), cp.truth.begin(), cp.truth.end());
  }
  ev.ccc = metrics::ccc(all_pred, all_true);
  ev.binned_error = metrics::binned_test_error(all_pred, all_true);
  for (std::size_t i = 0; i < all_true.size(); ++i)
    ev.binned_count[static_cast<int>(imbalance::bin_of(all_true[i]))] += 1;
  return ev;
}

inline const metrics::PeriodMetrics& period_metrics(const metrics::CaseMetrics& cm, int p) {
  switch (p) {
    case 0: return cm.induction;
    case 1: return cm.maintenance;
    case 2: return cm.recovery;
    default: return cm.all;
  }
}

// One row per case per period.
inline std::string per_case_csv(const std::vector<MethodEvaluation>& evs) {
  std::string out = "method,case_id,period,n,mdpe,mdape,rmse\n";
  char buf[256];
  for (const auto& ev : evs) {
    for (std::size_t c = 0; c < ev.case_ids.size(); ++c) {
      for (int p : {-1, 0, 1, 2}) {
        const auto& m = period_metrics(ev.per_case[c], p);
        if (m.n == 0) continue;
        std::snprintf(buf, sizeof(buf), "%s,%s,%s,%zu,%.6f,%.6f,%.6f\n", ev.method.c_str(),
                      ev.case_ids[c].c_str(), metrics::period_name(p), m.n, m.mdpe, m.mdape,
                      m.rmse);
        out += buf;
      }
    }
  }
  return out;
}

// Cohort summary: periods x methods x metrics, mean +- SD over cases.
inline std::string summary_csv(const std::vector<MethodEvaluation>& evs) {
  std::string out = "period,metric";
  for (const auto& ev : evs) out += "," + ev.method;
  out += "\n";
  const char* metric_names[3] = {"MDPE(%)", "MDAPE(%)", "RMSE"};
  for (int p : {-1, 0, 1, 2}) {
    for (int metric = 0; metric < 3; ++metric) {
      out += std::string(metrics::period_name(p)) + "," + metric_names[metric];
      for (const auto& ev : evs) {
        std::vector<double> vals;
        for (const auto& cm : ev.per_case) {
          const auto& m = period_metrics(cm, p);
          if (m.n == 0) continue;
          vals.push_back(metric == 0 ? m.mdpe : (metric == 1 ? m.mdape : m.rmse));
        }
        auto ms = metrics::mean_sd(vals);
        char buf[96];
        if (ms.n > 0)
          std::snprintf(buf, sizeof(buf), ",%.2f +- %.2f", ms.mean, ms.sd);
        else
          std::snprintf(buf, sizeof(buf), ",");
        out += buf;
      }
      out += "\n";
    }
  }
  out += "ccc,CCC";
  for (const auto& ev : evs) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), ",%.3f [%.3f to %.3f]", ev.ccc.ccc, ev.ccc.ci_lower,
                  ev.ccc.ci_upper);
    out += buf;
  }
  out += "\n";
  return out;
}

// 101-row per-bin signed test error; empty cells for unpopulated bins.
inline std::string binned_error_csv(const MethodEvaluation& ev) {
  std::string out = "bin,n,error\n";
  char buf[96];
  for (int bin = 0; bin <= 100; ++bin) {
    auto nit = ev.binned_count.find(bin);
    std::size_t n = nit == ev.binned_count.end() ? 0 : nit->second;
    if (n == 0) {
      std::snprintf(buf, sizeof(buf), "%d,0,\n", bin);
    } else {
      std::snprintf(buf, sizeof(buf), "%d,%zu,%.6f\n", bin, n, ev.binned_error.at(bin));
    }
    out += buf;
  }
  return out;
}

// Figure-ready join of truth and each method's predictions for one case.
inline std::string joined_series_csv(const datapipe::Dataset& ds, const std::string& case_id,
                                     const std::vector<std::vector<CasePredictions>>& preds,
                                     const std::vector<std::string>& methods) {
  int ci = ds.case_index_of(case_id);
  require(ci >= 0, errc::config_error, "unknown case " + case_id);
  const auto& cs = ds.cases[static_cast<std::size_t>(ci)];
  std::string out = "t,true_bis";
  for (const auto& m : methods) out += "," + m;
  out += "\n";
  // per-method map second -> prediction
  std::vector<std::map<int, double>> by_sec(methods.size());
  for (std::size_t m = 0; m < methods.size(); ++m)
    for (const auto& cp : preds[m])
      if (cp.case_id == case_id)
        for (std::size_t i = 0; i < cp.seconds.size(); ++i)
          by_sec[m][cp.seconds[i]] = cp.predicted[i];
  char buf[64];
  for (std::size_t t = 0; t < cs.bis.size(); ++t) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f", t, cs.bis[t]);
    out += buf;
    for (std::size_t m = 0; m < methods.size(); ++m) {
      auto it = by_sec[m].find(static_cast<int>(t));
      if (it == by_sec[m].end()) {
        out += ",";
      } else {
        std::snprintf(buf, sizeof(buf), ",%.6f", it->second);
        out += buf;
      }
    }
    out += "\n";
  }
  return out;
}

// Label density export (train split) for distribution plots.
inline std::string label_density_csv(const datapipe::Dataset& ds) {
  return imbalance::weight_table_csv(ds.density, ds.weights);
}

}  // namespace doa::pipeline
