#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace doa {

// Error taxonomy shared by all modules. Each failure mode gets its own code so
// callers (and the CLI exit-code mapping) can react without string matching.
enum class errc {
  shape_mismatch,
  domain_error,
  non_scalar_output,
  non_positive_lbm,
  non_positive_parameter,
  negative_concentration,
  misaligned_series,
  out_of_range_target,
  empty_density,
  non_finite_input,
  non_finite_loss,
  empty_case,
  series_too_short,
  missing_norms,
  missing_anchor,
  zero_true_value,
  degenerate_series,
  window_exceeds_series,
  config_error,
  io_error,
};

inline const char* errc_name(errc c) {
  switch (c) {
    case errc::shape_mismatch: return "ShapeMismatch";
    case errc::domain_error: return "DomainError";
    case errc::non_scalar_output: return "NonScalarOutput";
    case errc::non_positive_lbm: return "NonPositiveLbm";
    case errc::non_positive_parameter: return "NonPositiveParameter";
    case errc::negative_concentration: return "NegativeConcentration";
    case errc::misaligned_series: return "MisalignedSeries";
    case errc::out_of_range_target: return "OutOfRangeTarget";
    case errc::empty_density: return "EmptyDensity";
    case errc::non_finite_input: return "NonFiniteInput";
    case errc::non_finite_loss: return "NonFiniteLoss";
    case errc::empty_case: return "EmptyCase";
    case errc::series_too_short: return "SeriesTooShort";
    case errc::missing_norms: return "MissingNorms";
    case errc::missing_anchor: return "MissingAnchor";
    case errc::zero_true_value: return "ZeroTrueValue";
    case errc::degenerate_series: return "DegenerateSeries";
    case errc::window_exceeds_series: return "WindowExceedsSeries";
    case errc::config_error: return "ConfigError";
    case errc::io_error: return "IoError";
  }
  return "UnknownError";
}

class Error : public std::runtime_error {
 public:
  Error(errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}
  errc code() const { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc c, const std::string& msg) { throw Error(c, msg); }

inline void require(bool ok, errc c, const std::string& msg) {
  if (!ok) fail(c, msg);
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distribution transforms are hand-rolled because std:: distributions are
// implementation-defined and would break byte-identical reproducibility.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix(seed)) {}

  std::uint64_t next_u64() {
    // xorshift* over a splitmix-initialized state; period and quality are
    // plenty for simulation seeding and weight init.
    std::uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545F4914F6CDD1DULL;
  }

  // uniform in [0, 1)
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {  // inclusive bounds
    return lo + static_cast<std::int64_t>(uniform01() * static_cast<double>(hi - lo + 1));
  }

  double normal(double mean = 0.0, double sd = 1.0) {
    // Box-Muller, no spare caching so the draw sequence stays obvious.
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sd * r * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Independent substream; parallel per-case generation matches serial order.
  Rng fork(std::uint64_t stream) const { return Rng(state_ ^ splitmix(stream ^ 0x9E3779B97F4A7C15ULL)); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

  std::uint64_t state_;
};

}  // namespace doa
