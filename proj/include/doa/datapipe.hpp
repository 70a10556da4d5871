#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "doa/common.hpp"
#include "doa/imbalance.hpp"
#include "doa/lowess.hpp"
#include "doa/pkpd.hpp"

// Case ingestion: per-second CSV records are cleaned, binned to 10 s, labeled
// with PK-PD pseudo-BIS, normalized, and exposed as windowed training samples.
//
// Case CSV layout (one file per case):
//   # case_id=<id> age=<years> sex=<male|female> weight=<kg> height=<cm>
//   #   [dose_kind=per_second|cumulative]
//   t,ppf_dose,rftn_dose,bis
//   0,0.0,0.0,97.6
//   ...
// Sidecar lines start with '#' and hold space-separated key=value pairs.
// Doses are micrograms delivered in the row's second (or cumulative totals
// when dose_kind=cumulative); bis may be empty / "null" / "nan" for missing.
namespace doa::datapipe {

inline constexpr int kBinSeconds = 10;
inline constexpr std::size_t kWindowBins = 180;  // 1800 s of history

struct RawRow {
  int t = 0;          // seconds from record start
  double ppf = 0.0;   // ug delivered this second
  double rftn = 0.0;  // ug delivered this second
  double bis = 0.0;
};

struct RawCase {
  std::string case_id;
  pkpd::Patient patient;
  std::vector<RawRow> rows;  // contiguous 1 Hz grid starting at t = 0
};

struct CaseRejection {
  enum class Reason { gap, partial, malformed };
  Reason reason = Reason::malformed;
  std::string case_id;
  std::string detail;
};

inline const char* rejection_name(CaseRejection::Reason r) {
  switch (r) {
    case CaseRejection::Reason::gap: return "gap";
    case CaseRejection::Reason::partial: return "partial";
    case CaseRejection::Reason::malformed: return "malformed";
  }
  return "unknown";
}

using ParseResult = std::variant<RawCase, CaseRejection>;

struct CaseBin {
  double ppf_dose = 0.0;   // ug in this 10 s bin
  double rftn_dose = 0.0;  // ug
  double ppf_rate = 0.0;   // ug/s == dose / 10
  double rftn_rate = 0.0;  // ug/s
};

struct CaseSeries {
  std::string case_id;
  pkpd::Patient patient;
  std::vector<CaseBin> bins;
  std::vector<double> bis;           // per second, cleaned
  std::vector<double> bis_label;     // training-label series (LOWESS for train split)
  std::vector<double> pseudo_bis;    // per bin, from the PK-PD simulator
  int t_induction_start = 0;         // first nonzero propofol dose, seconds
  int t_propofol_stop = 0;           // last nonzero propofol dose, seconds
  int t_end = 0;                     // last second of the record
};

// ---------------------------------------------------------------------------
// parsing / cleaning
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline bool parse_double(const std::string& s, double& out) {
  std::string t = trim(s);
  if (t.empty()) return false;
  std::string lower;
  for (char c : t) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "null" || lower == "nan" || lower == "na") return false;
  char* end = nullptr;
  out = std::strtod(t.c_str(), &end);
  if (end == nullptr || *end != '\0') return false;
  return std::isfinite(out);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// Linear interpolation of invalid entries between nearest valid neighbors;
// edge runs take the nearest valid value. Returns false if nothing is valid.
inline bool interpolate_invalid(std::vector<double>& v, const std::vector<bool>& valid) {
  std::size_t n = v.size();
  std::size_t first_valid = n;
  for (std::size_t i = 0; i < n; ++i)
    if (valid[i]) {
      first_valid = i;
      break;
    }
  if (first_valid == n) return false;
  std::size_t last_valid = 0;
  for (std::size_t i = n; i-- > 0;)
    if (valid[i]) {
      last_valid = i;
      break;
    }
  for (std::size_t i = 0; i < first_valid; ++i) v[i] = v[first_valid];
  for (std::size_t i = last_valid + 1; i < n; ++i) v[i] = v[last_valid];
  std::size_t i = first_valid;
  while (i <= last_valid) {
    if (valid[i]) {
      ++i;
      continue;
    }
    std::size_t lo = i - 1;  // valid by construction
    std::size_t hi = i;
    while (!valid[hi]) ++hi;
    for (std::size_t j = i; j < hi; ++j) {
      double a = static_cast<double>(j - lo) / static_cast<double>(hi - lo);
      v[j] = (1.0 - a) * v[lo] + a * v[hi];
    }
    i = hi;
  }
  return true;
}

inline std::size_t longest_invalid_run(const std::vector<bool>& valid) {
  std::size_t best = 0, cur = 0;
  for (bool ok : valid) {
    cur = ok ? 0 : cur + 1;
    best = std::max(best, cur);
  }
  return best;
}

}  // namespace detail

// Reads one case CSV, interpolates outliers/nulls, and applies the rejection
// rules: any contiguous data loss over 30 s, or records missing the infusion
// start or the post-infusion tail.
inline ParseResult parse_and_clean(std::istream& in, const std::string& fallback_id = "case") {
  std::map<std::string, std::string> meta;
  std::string line;
  std::string header;
  std::size_t line_no = 0;

  auto reject = [&](CaseRejection::Reason r, const std::string& why) {
    CaseRejection rej;
    rej.reason = r;
    rej.case_id = meta.count("case_id") ? meta["case_id"] : fallback_id;
    rej.detail = why;
    return ParseResult(rej);
  };

  // sidecar header lines, then the column header
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      std::istringstream ss(t.substr(1));
      std::string kv;
      while (ss >> kv) {
        auto eq = kv.find('=');
        if (eq != std::string::npos) meta[kv.substr(0, eq)] = kv.substr(eq + 1);
      }
      continue;
    }
    header = t;
    break;
  }
  {
    std::string squashed;
    for (char c : header)
      if (!std::isspace(static_cast<unsigned char>(c))) squashed += c;
    if (squashed != "t,ppf_dose,rftn_dose,bis")
      return reject(CaseRejection::Reason::malformed,
                    "expected header 't,ppf_dose,rftn_dose,bis', got '" + header + "'");
  }

  pkpd::Patient patient;
  try {
    for (const char* key : {"age", "sex", "weight", "height"})
      require(meta.count(key) > 0, errc::io_error, std::string("missing covariate ") + key);
    patient.age = std::stoi(meta["age"]);
    patient.sex = meta["sex"] == "male"
                      ? pkpd::Sex::male
                      : (meta["sex"] == "female"
                             ? pkpd::Sex::female
                             : throw Error(errc::io_error, "sex must be male|female"));
    double w, h;
    require(detail::parse_double(meta["weight"], w) && detail::parse_double(meta["height"], h),
            errc::io_error, "bad weight/height");
    patient.weight = w;
    patient.height = h;
    patient.validate();
  } catch (const std::exception& e) {
    return reject(CaseRejection::Reason::malformed, std::string("covariates: ") + e.what());
  }

  bool cumulative = meta.count("dose_kind") && meta["dose_kind"] == "cumulative";

  // raw triples on the original clock
  std::vector<long> ts;
  std::vector<double> ppf_v, rftn_v, bis_v;
  std::vector<bool> ppf_ok, rftn_ok, bis_ok;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = detail::trim(line);
    if (t.empty()) continue;
    auto cols = detail::split_csv(t);
    if (cols.size() != 4)
      return reject(CaseRejection::Reason::malformed,
                    "row " + std::to_string(line_no) + ": expected 4 columns");
    double tv;
    if (!detail::parse_double(cols[0], tv) || tv < 0 || tv != std::floor(tv))
      return reject(CaseRejection::Reason::malformed,
                    "row " + std::to_string(line_no) + ": bad timestamp '" + cols[0] + "'");
    if (!ts.empty() && static_cast<long>(tv) <= ts.back())
      return reject(CaseRejection::Reason::malformed,
                    "row " + std::to_string(line_no) + ": timestamps must increase");
    ts.push_back(static_cast<long>(tv));
    double v;
    bool ok;
    ok = detail::parse_double(cols[1], v);
    ppf_v.push_back(ok ? v : 0.0);
    ppf_ok.push_back(ok);
    ok = detail::parse_double(cols[2], v);
    rftn_v.push_back(ok ? v : 0.0);
    rftn_ok.push_back(ok);
    ok = detail::parse_double(cols[3], v);
    bis_v.push_back(ok ? v : 0.0);
    bis_ok.push_back(ok);
  }
  if (ts.size() < 2) return reject(CaseRejection::Reason::malformed, "fewer than 2 data rows");

  // reindex to a contiguous 1 Hz grid; skipped timestamps count as data loss
  long t0 = ts.front();
  std::size_t n = static_cast<std::size_t>(ts.back() - t0 + 1);
  std::vector<double> ppf(n, 0.0), rftn(n, 0.0), bis(n, 0.0);
  std::vector<bool> ppf_valid(n, false), rftn_valid(n, false), bis_valid(n, false);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    auto idx = static_cast<std::size_t>(ts[i] - t0);
    ppf[idx] = ppf_v[i];
    ppf_valid[idx] = ppf_ok[i];
    rftn[idx] = rftn_v[i];
    rftn_valid[idx] = rftn_ok[i];
    bis[idx] = bis_v[i];
    bis_valid[idx] = bis_ok[i];
  }

  if (cumulative) {
    // difference the running totals, then treat negatives as outliers below
    std::vector<double> d(n, 0.0);
    std::vector<bool> dv(n, false);
    auto diff = [&](std::vector<double>& col, std::vector<bool>& colv) {
      double prev = 0.0;
      bool have_prev = false;
      for (std::size_t i = 0; i < n; ++i) {
        if (!colv[i]) {
          dv[i] = false;
          d[i] = 0.0;
          continue;
        }
        d[i] = have_prev ? col[i] - prev : col[i];
        dv[i] = true;
        prev = col[i];
        have_prev = true;
      }
      col = d;
      colv = dv;
    };
    diff(ppf, ppf_valid);
    diff(rftn, rftn_valid);
  }

  // outlier rules: doses must be non-negative, BIS must sit in [0, 100]
  for (std::size_t i = 0; i < n; ++i) {
    if (ppf_valid[i] && ppf[i] < 0.0) ppf_valid[i] = false;
    if (rftn_valid[i] && rftn[i] < 0.0) rftn_valid[i] = false;
    if (bis_valid[i] && (bis[i] < 0.0 || bis[i] > 100.0)) bis_valid[i] = false;
  }

  std::size_t worst = std::max({detail::longest_invalid_run(ppf_valid),
                                detail::longest_invalid_run(rftn_valid),
                                detail::longest_invalid_run(bis_valid)});
  if (worst > 30)
    return reject(CaseRejection::Reason::gap,
                  "contiguous data loss of " + std::to_string(worst) + " s exceeds 30 s");

  if (!detail::interpolate_invalid(ppf, ppf_valid) ||
      !detail::interpolate_invalid(rftn, rftn_valid) ||
      !detail::interpolate_invalid(bis, bis_valid))
    return reject(CaseRejection::Reason::malformed, "a column has no valid values");

  // half-field records: no infusion onset, or infusion still running at the
  // final sample (no recovery tail)
  std::size_t first_pos = n, last_pos = n;
  for (std::size_t i = 0; i < n; ++i)
    if (ppf[i] > 0.0) {
      if (first_pos == n) first_pos = i;
      last_pos = i;
    }
  if (first_pos == n)
    return reject(CaseRejection::Reason::partial, "no propofol infusion found");
  if (last_pos + 1 >= n)
    return reject(CaseRejection::Reason::partial, "record ends during propofol infusion");

  RawCase rc;
  rc.case_id = meta.count("case_id") ? meta["case_id"] : fallback_id;
  rc.patient = patient;
  rc.rows.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    rc.rows[i].t = static_cast<int>(i);
    rc.rows[i].ppf = std::max(0.0, ppf[i]);
    rc.rows[i].rftn = std::max(0.0, rftn[i]);
    rc.rows[i].bis = std::clamp(bis[i], 0.0, 100.0);
  }
  return ParseResult(std::move(rc));
}

inline ParseResult parse_and_clean_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    CaseRejection rej;
    rej.reason = CaseRejection::Reason::malformed;
    rej.case_id = path.stem().string();
    rej.detail = "cannot open " + path.string();
    return rej;
  }
  return parse_and_clean(in, path.stem().string());
}

// ---------------------------------------------------------------------------
// binning
// ---------------------------------------------------------------------------

inline CaseSeries bin_case(const RawCase& raw) {
  require(!raw.rows.empty(), errc::empty_case, "no rows in case " + raw.case_id);
  CaseSeries cs;
  cs.case_id = raw.case_id;
  cs.patient = raw.patient;
  std::size_t n = raw.rows.size();
  std::size_t n_bins = (n + kBinSeconds - 1) / kBinSeconds;
  cs.bins.assign(n_bins, {});
  cs.bis.resize(n);
  int first_pos = -1, last_pos = -1;
  for (std::size_t i = 0; i < n; ++i) {
    const RawRow& r = raw.rows[i];
    std::size_t b = i / kBinSeconds;
    cs.bins[b].ppf_dose += r.ppf;
    cs.bins[b].rftn_dose += r.rftn;
    cs.bis[i] = r.bis;
    if (r.ppf > 0.0) {
      if (first_pos < 0) first_pos = r.t;
      last_pos = r.t;
    }
  }
  require(first_pos >= 0, errc::empty_case, "no propofol dose in case " + raw.case_id);
  for (auto& b : cs.bins) {
    b.ppf_rate = b.ppf_dose / kBinSeconds;
    b.rftn_rate = b.rftn_dose / kBinSeconds;
  }
  cs.bis_label = cs.bis;
  cs.t_induction_start = first_pos;
  cs.t_propofol_stop = last_pos;
  cs.t_end = raw.rows.back().t;
  return cs;
}

// PK-PD pseudo-BIS per bin under the stock population parameters.
inline std::vector<double> pkpd_pseudo_bis(const CaseSeries& cs,
                                           const pkpd::IntegrationOptions& opt = {}) {
  pkpd::InfusionSchedule up, ur;
  up.resolution_s = kBinSeconds;
  ur.resolution_s = kBinSeconds;
  for (const auto& b : cs.bins) {
    up.rates_ug_per_s.push_back(b.ppf_rate);
    ur.rates_ug_per_s.push_back(b.rftn_rate);
  }
  double duration = static_cast<double>(cs.bins.size()) * kBinSeconds;
  return pkpd::pseudo_bis(cs.patient, up, ur, duration, opt);
}

// ---------------------------------------------------------------------------
// normalization and windowing
// ---------------------------------------------------------------------------

struct Normalization {
  double ppf_mean = 0, ppf_scale = 1;
  double rftn_mean = 0, rftn_scale = 1;
  double bis_mean = 0, bis_scale = 1;          // shared by pseudo-BIS and targets
  double static_mean[4] = {0, 0, 0, 0};        // age, sex, weight, height
  double static_scale[4] = {1, 1, 1, 1};
};

inline double normalize(double x, double mean, double scale) { return (x - mean) / scale; }
inline double denormalize(double z, double mean, double scale) { return z * scale + mean; }

inline std::array<double, 4> static_covariates(const pkpd::Patient& p) {
  return {static_cast<double>(p.age), p.sex == pkpd::Sex::male ? 1.0 : 0.0, p.weight, p.height};
}

// One model input window: everything normalized except the label-side series.
struct SampleWindow {
  std::vector<double> ppf;      // [Tw]
  std::vector<double> rftn;     // [Tw]
  std::vector<double> pseudo;   // [Tw]
  std::array<double, 4> statics{};
  std::vector<double> y_hist;   // [Tw] true BIS history, raw scale
  double y_target = 0.0;        // BIS at t+1, raw scale
  double weight = 1.0;
};

struct SampleRef {
  std::uint32_t case_index = 0;
  std::uint32_t t = 0;  // prediction second; target is bis at t+1
};

// Builds the 180-bin window ending at the last bin fully covered by time t.
// Bins before the record start are zero vectors in normalized space; their
// history labels take the awake baseline.
inline void fill_window(const CaseSeries& cs, std::uint32_t t, const Normalization& nz,
                        const imbalance::WeightTable* wt, SampleWindow& out) {
  require(t + 1 < cs.bis_label.size(), errc::shape_mismatch,
          "sample t out of range for case " + cs.case_id);
  const std::size_t Tw = kWindowBins;
  out.ppf.assign(Tw, 0.0);
  out.rftn.assign(Tw, 0.0);
  out.pseudo.assign(Tw, 0.0);
  out.y_hist.assign(Tw, 98.0);

  long k_last = static_cast<long>((t + 1) / kBinSeconds) - 1;
  for (std::size_t j = 0; j < Tw; ++j) {
    long k = k_last - static_cast<long>(Tw - 1 - j);
    if (k < 0) continue;  // pre-record: stay zero / baseline
    auto kb = static_cast<std::size_t>(k);
    if (kb < cs.bins.size()) {
      out.ppf[j] = normalize(cs.bins[kb].ppf_rate, nz.ppf_mean, nz.ppf_scale);
      out.rftn[j] = normalize(cs.bins[kb].rftn_rate, nz.rftn_mean, nz.rftn_scale);
    }
    if (kb < cs.pseudo_bis.size())
      out.pseudo[j] = normalize(cs.pseudo_bis[kb], nz.bis_mean, nz.bis_scale);
    std::size_t label_idx = std::min(cs.bis_label.size() - 1,
                                     kb * kBinSeconds + (kBinSeconds - 1));
    out.y_hist[j] = cs.bis_label[label_idx];
  }
  auto sc = static_covariates(cs.patient);
  for (int i = 0; i < 4; ++i)
    out.statics[static_cast<std::size_t>(i)] =
        normalize(sc[static_cast<std::size_t>(i)], nz.static_mean[i], nz.static_scale[i]);
  out.y_target = cs.bis_label[t + 1];
  out.weight = wt ? wt->weight_for(out.y_target) : 1.0;
}

// ---------------------------------------------------------------------------
// dataset container + binary serialization
// ---------------------------------------------------------------------------

struct Dataset {
  std::uint8_t version = 1;
  Normalization norms;
  imbalance::LabelDensity density;
  imbalance::WeightTable weights;
  std::vector<CaseSeries> cases;
  std::vector<std::string> split_train, split_val, split_test;

  const std::vector<std::string>& split(const std::string& name) const {
    if (name == "train") return split_train;
    if (name == "val") return split_val;
    if (name == "test") return split_test;
    fail(errc::config_error, "unknown split '" + name + "'");
  }

  int case_index_of(const std::string& id) const {
    for (std::size_t i = 0; i < cases.size(); ++i)
      if (cases[i].case_id == id) return static_cast<int>(i);
    return -1;
  }

  // Sample enumeration: one prediction second per `stride` in each case of
  // the split, in dataset order.
  std::vector<SampleRef> samples_for(const std::string& split_name,
                                     std::uint32_t stride = 1) const {
    require(stride >= 1, errc::config_error, "stride must be >= 1");
    std::vector<SampleRef> out;
    for (const std::string& id : split(split_name)) {
      int ci = case_index_of(id);
      require(ci >= 0, errc::config_error, "split references unknown case " + id);
      const CaseSeries& cs = cases[static_cast<std::size_t>(ci)];
      for (std::uint32_t t = 0; t + 1 < cs.bis_label.size(); t += stride)
        out.push_back({static_cast<std::uint32_t>(ci), t});
    }
    return out;
  }
};

// Normalization from the training split only; scale is the population SD
// (falls back to 1 for constant columns).
inline Normalization compute_normalization(const Dataset& ds) {
  struct Acc {
    double s = 0, s2 = 0;
    std::size_t n = 0;
    void add(double x) {
      s += x;
      s2 += x * x;
      ++n;
    }
    double mean() const { return n ? s / static_cast<double>(n) : 0.0; }
    double scale() const {
      if (!n) return 1.0;
      double m = mean();
      double var = s2 / static_cast<double>(n) - m * m;
      double sd = var > 0 ? std::sqrt(var) : 0.0;
      return sd > 1e-12 ? sd : 1.0;
    }
  };
  Acc ppf, rftn, bis, stat[4];
  for (const std::string& id : ds.split_train) {
    int ci = ds.case_index_of(id);
    require(ci >= 0, errc::config_error, "split references unknown case " + id);
    const CaseSeries& cs = ds.cases[static_cast<std::size_t>(ci)];
    for (const auto& b : cs.bins) {
      ppf.add(b.ppf_rate);
      rftn.add(b.rftn_rate);
    }
    for (double y : cs.bis_label) bis.add(y);
    auto sc = static_covariates(cs.patient);
    for (int i = 0; i < 4; ++i) stat[i].add(sc[static_cast<std::size_t>(i)]);
  }
  require(ppf.n > 0, errc::missing_norms, "training split is empty");
  Normalization nz;
  nz.ppf_mean = ppf.mean();
  nz.ppf_scale = ppf.scale();
  nz.rftn_mean = rftn.mean();
  nz.rftn_scale = rftn.scale();
  nz.bis_mean = bis.mean();
  nz.bis_scale = bis.scale();
  for (int i = 0; i < 4; ++i) {
    nz.static_mean[i] = stat[i].mean();
    nz.static_scale[i] = stat[i].scale();
  }
  return nz;
}

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  require(is.good(), errc::io_error, "truncated stream (u32)");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
  static_assert(sizeof(double) == 8);
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  require(is.good(), errc::io_error, "truncated stream (f64)");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  std::uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  require(is.good(), errc::io_error, "truncated stream (string)");
  return s;
}

inline void put_f64_vec(std::ostream& os, const std::vector<double>& v) {
  put_u32(os, static_cast<std::uint32_t>(v.size()));
  for (double x : v) put_f64(os, x);
}

inline std::vector<double> get_f64_vec(std::istream& is) {
  std::uint32_t n = get_u32(is);
  std::vector<double> v(n);
  for (auto& x : v) x = get_f64(is);
  return v;
}

}  // namespace io

inline constexpr char kDatasetMagic[8] = {'D', 'O', 'A', 'D', 'S', 'E', 'T', '\0'};

inline void save_dataset(const Dataset& ds, std::ostream& os) {
  os.write(kDatasetMagic, 8);
  os.put(static_cast<char>(ds.version));
  io::put_u32(os, kBinSeconds);
  io::put_u32(os, kWindowBins);
  io::put_f64(os, ds.norms.ppf_mean);
  io::put_f64(os, ds.norms.ppf_scale);
  io::put_f64(os, ds.norms.rftn_mean);
  io::put_f64(os, ds.norms.rftn_scale);
  io::put_f64(os, ds.norms.bis_mean);
  io::put_f64(os, ds.norms.bis_scale);
  for (int i = 0; i < 4; ++i) {
    io::put_f64(os, ds.norms.static_mean[i]);
    io::put_f64(os, ds.norms.static_scale[i]);
  }
  io::put_f64_vec(os, ds.density.empirical);
  io::put_f64_vec(os, ds.density.smoothed);
  io::put_f64(os, ds.density.kernel_sigma);
  io::put_u32(os, static_cast<std::uint32_t>(ds.density.kernel_radius));
  io::put_f64_vec(os, ds.weights.w);
  io::put_f64(os, ds.weights.w_cap);
  io::put_u32(os, static_cast<std::uint32_t>(ds.cases.size()));
  for (const auto& cs : ds.cases) {
    io::put_string(os, cs.case_id);
    io::put_u32(os, static_cast<std::uint32_t>(cs.patient.age));
    os.put(cs.patient.sex == pkpd::Sex::male ? 'M' : 'F');
    io::put_f64(os, cs.patient.weight);
    io::put_f64(os, cs.patient.height);
    io::put_u32(os, static_cast<std::uint32_t>(cs.t_induction_start));
    io::put_u32(os, static_cast<std::uint32_t>(cs.t_propofol_stop));
    io::put_u32(os, static_cast<std::uint32_t>(cs.t_end));
    io::put_u32(os, static_cast<std::uint32_t>(cs.bins.size()));
    for (const auto& b : cs.bins) {
      io::put_f64(os, b.ppf_dose);
      io::put_f64(os, b.rftn_dose);
    }
    io::put_f64_vec(os, cs.bis);
    io::put_f64_vec(os, cs.bis_label);
    io::put_f64_vec(os, cs.pseudo_bis);
  }
  for (const auto* split : {&ds.split_train, &ds.split_val, &ds.split_test}) {
    io::put_u32(os, static_cast<std::uint32_t>(split->size()));
    for (const auto& id : *split) io::put_string(os, id);
  }
}

inline Dataset load_dataset(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  require(is.good() && std::memcmp(magic, kDatasetMagic, 8) == 0, errc::io_error,
          "not a dataset file");
  Dataset ds;
  ds.version = static_cast<std::uint8_t>(is.get());
  require(ds.version == 1, errc::io_error,
          "unsupported dataset version " + std::to_string(ds.version));
  require(io::get_u32(is) == kBinSeconds, errc::io_error, "bin length mismatch");
  require(io::get_u32(is) == kWindowBins, errc::io_error, "window length mismatch");
  ds.norms.ppf_mean = io::get_f64(is);
  ds.norms.ppf_scale = io::get_f64(is);
  ds.norms.rftn_mean = io::get_f64(is);
  ds.norms.rftn_scale = io::get_f64(is);
  ds.norms.bis_mean = io::get_f64(is);
  ds.norms.bis_scale = io::get_f64(is);
  for (int i = 0; i < 4; ++i) {
    ds.norms.static_mean[i] = io::get_f64(is);
    ds.norms.static_scale[i] = io::get_f64(is);
  }
  ds.density.empirical = io::get_f64_vec(is);
  ds.density.smoothed = io::get_f64_vec(is);
  ds.density.kernel_sigma = io::get_f64(is);
  ds.density.kernel_radius = static_cast<int>(io::get_u32(is));
  ds.weights.w = io::get_f64_vec(is);
  ds.weights.w_cap = io::get_f64(is);
  std::uint32_t n_cases = io::get_u32(is);
  ds.cases.resize(n_cases);
  for (auto& cs : ds.cases) {
    cs.case_id = io::get_string(is);
    cs.patient.age = static_cast<int>(io::get_u32(is));
    cs.patient.sex = is.get() == 'M' ? pkpd::Sex::male : pkpd::Sex::female;
    cs.patient.weight = io::get_f64(is);
    cs.patient.height = io::get_f64(is);
    cs.t_induction_start = static_cast<int>(io::get_u32(is));
    cs.t_propofol_stop = static_cast<int>(io::get_u32(is));
    cs.t_end = static_cast<int>(io::get_u32(is));
    cs.bins.resize(io::get_u32(is));
    for (auto& b : cs.bins) {
      b.ppf_dose = io::get_f64(is);
      b.rftn_dose = io::get_f64(is);
      b.ppf_rate = b.ppf_dose / kBinSeconds;
      b.rftn_rate = b.rftn_dose / kBinSeconds;
    }
    cs.bis = io::get_f64_vec(is);
    cs.bis_label = io::get_f64_vec(is);
    cs.pseudo_bis = io::get_f64_vec(is);
  }
  for (auto* split : {&ds.split_train, &ds.split_val, &ds.split_test}) {
    std::uint32_t n = io::get_u32(is);
    split->resize(n);
    for (auto& id : *split) id = io::get_string(is);
  }
  return ds;
}

inline void save_dataset_file(const Dataset& ds, const std::filesystem::path& path) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    require(os.good(), errc::io_error, "cannot write " + tmp.string());
    save_dataset(ds, os);
  }
  std::filesystem::rename(tmp, path);
}

inline Dataset load_dataset_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), errc::io_error, "cannot open " + path.string());
  return load_dataset(is);
}

}  // namespace doa::datapipe
