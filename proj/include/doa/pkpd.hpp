#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "doa/common.hpp"

// Pharmacokinetic-pharmacodynamic machinery: patient-specific Schnider
// (propofol) and Minto (remifentanil) three-compartment models, an effect-site
// compartment, and the Short response surface mapping paired effect-site
// concentrations to a BIS value.
namespace doa::pkpd {

enum class Sex { male, female };
enum class Drug { propofol, remifentanil };

inline const char* sex_name(Sex s) { return s == Sex::male ? "male" : "female"; }
inline const char* drug_name(Drug d) { return d == Drug::propofol ? "propofol" : "remifentanil"; }

struct Patient {
  int age = 0;          // years
  Sex sex = Sex::male;
  double weight = 0.0;  // kg
  double height = 0.0;  // cm

  void validate() const {
    require(age >= 0 && age <= 130, errc::domain_error,
            "age " + std::to_string(age) + " outside [0, 130]");
    require(weight > 0.0 && weight <= 400.0, errc::domain_error,
            "weight " + std::to_string(weight) + " outside (0, 400]");
    require(height > 50.0 && height <= 260.0, errc::domain_error,
            "height " + std::to_string(height) + " outside (50, 260]");
  }
};

struct PkParams {
  double v1 = 0, v2 = 0, v3 = 0;     // L
  double cl1 = 0, cl2 = 0, cl3 = 0;  // L/min
  double ke0 = 0;                    // 1/min

  void validate() const {
    const double vals[] = {v1, v2, v3, cl1, cl2, cl3, ke0};
    const char* names[] = {"v1", "v2", "v3", "cl1", "cl2", "cl3", "ke0"};
    for (int i = 0; i < 7; ++i)
      require(vals[i] > 0.0, errc::non_positive_parameter,
              std::string(names[i]) + " = " + std::to_string(vals[i]));
  }
};

struct RateConstants {
  double k10 = 0, k12 = 0, k21 = 0, k13 = 0, k31 = 0;  // 1/min

  void validate() const {
    require(k10 > 0.0, errc::non_positive_parameter, "k10 must be positive");
    require(k12 >= 0 && k21 >= 0 && k13 >= 0 && k31 >= 0, errc::non_positive_parameter,
            "negative rate constant");
  }
};

struct PdParams {
  double bis0 = 98.0;
  double bis_min = 0.0;
  double ec50p = 4.47;  // ug/mL
  double ec50r = 19.3;  // ug/mL
  double gamma = 1.43;

  void validate() const {
    require(bis0 > bis_min && bis_min >= 0.0, errc::domain_error, "need bis0 > bis_min >= 0");
    require(ec50p > 0.0 && ec50r > 0.0, errc::domain_error, "EC50 must be positive");
    require(gamma > 0.0, errc::domain_error, "gamma must be positive");
  }
};

struct CompartmentState {
  double c1 = 0, c2 = 0, c3 = 0;  // ug/mL
  double ce = 0;                  // effect-site, ug/mL
};

// Lean body mass (James formula, as used by the Schnider/Minto covariates).
// A non-positive result flags physiologically invalid covariates.
inline double compute_lbm(const Patient& p) {
  require(p.height > 0.0, errc::non_positive_lbm, "non-positive height");
  double w = p.weight, h = p.height;
  double lbm = p.sex == Sex::male ? 1.1 * w - 128.0 * (w / h) * (w / h)
                                  : 1.07 * w - 140.0 * (w / h) * (w / h);
  require(lbm > 0.0, errc::non_positive_lbm,
          "lean body mass " + std::to_string(lbm) + " for weight " + std::to_string(w) +
              " height " + std::to_string(h));
  return lbm;
}

// Covariate-adjusted compartment parameters. Schnider for propofol, Minto for
// remifentanil. The Schnider cl1 height term is centered at 177 cm.
inline PkParams derive_pk_params(const Patient& p, Drug drug) {
  p.validate();
  double lbm = compute_lbm(p);
  double age = static_cast<double>(p.age);
  PkParams pk;
  if (drug == Drug::propofol) {
    pk.v1 = 4.27;
    pk.v2 = 18.9 - 0.391 * (age - 53.0);
    pk.v3 = 238.0;
    pk.cl1 = 1.89 + 0.0456 * (p.weight - 77.0) - 0.0681 * (lbm - 59.0) +
             0.0264 * (p.height - 177.0);
    pk.cl2 = 1.29 - 0.024 * (age - 53.0);
    pk.cl3 = 0.836;
    pk.ke0 = 0.46;
  } else {
    pk.v1 = 5.1 - 0.0201 * (age - 40.0) + 0.072 * (lbm - 55.0);
    pk.v2 = 9.82 - 0.0811 * (age - 40.0);
    pk.v3 = 5.42;
    pk.cl1 = 2.6 - 0.0162 * (age - 40.0) + 0.0191 * (lbm - 55.0);
    pk.cl2 = 2.05 - 0.0301 * (age - 40.0);
    pk.cl3 = 0.076 - 0.00113 * (age - 40.0);
    pk.ke0 = 0.595 - 0.007 * (age - 40.0);
  }
  pk.validate();
  return pk;
}

// Standard mammillary conversion from clearances to first-order rates.
// Accepts zero peripheral clearances (degenerate one-compartment setups).
inline RateConstants derive_rate_constants(const PkParams& pk) {
  require(pk.v1 > 0 && pk.v2 > 0 && pk.v3 > 0, errc::non_positive_parameter,
          "volumes must be positive");
  require(pk.cl1 > 0 && pk.cl2 >= 0 && pk.cl3 >= 0, errc::non_positive_parameter,
          "cl1 must be positive, cl2/cl3 non-negative");
  RateConstants k;
  k.k10 = pk.cl1 / pk.v1;
  k.k12 = pk.cl2 / pk.v1;
  k.k21 = pk.cl2 / pk.v2;
  k.k13 = pk.cl3 / pk.v1;
  k.k31 = pk.cl3 / pk.v3;
  k.validate();
  return k;
}

// Response surface: BIS as a sigmoid in the potency-normalized concentration
// sum. Non-increasing in both concentrations; range [bis_min, bis0].
inline double response_surface_bis(double ec_p, double ec_r, const PdParams& pd = {}) {
  pd.validate();
  require(ec_p >= 0.0 && ec_r >= 0.0, errc::domain_error, "negative effect-site concentration");
  double s = ec_r / pd.ec50r + ec_p / pd.ec50p;
  if (s <= 0.0) return pd.bis0;
  double sg = std::pow(s, pd.gamma);
  return pd.bis0 + (pd.bis_min - pd.bis0) * sg / (1.0 + sg);
}

// Infusion schedule sampled on a fixed grid: rate(t) is piecewise constant on
// [i*resolution_s, (i+1)*resolution_s) and zero past the end.
struct InfusionSchedule {
  std::vector<double> rates_ug_per_s;
  double resolution_s = 1.0;

  double rate_at(double t_s) const {
    if (rates_ug_per_s.empty() || t_s < 0.0) return 0.0;
    auto idx = static_cast<std::size_t>(t_s / resolution_s);
    if (idx >= rates_ug_per_s.size()) return 0.0;
    return rates_ug_per_s[idx];
  }

  // Left-limit sample; integration steps ending exactly on a sample boundary
  // must see the rate that was active over the step's interior.
  double rate_before(double t_s) const { return rate_at(t_s - resolution_s * 1e-9); }
};

struct IntegrationOptions {
  double dt_s = 1.0;         // RK4 step
  double record_every_s = 10.0;
  double clamp_tol = 1e-9;   // states below -tol abort the run
};

namespace detail {

struct Deriv {
  double dc1, dc2, dc3, dce;
};

// Right-hand side of the mammillary system plus effect site, in 1/min.
// u in mg/min; concentrations in ug/mL (== mg/L); volumes in L.
inline Deriv rhs(const CompartmentState& s, double u_mg_min, double v1, double v2, double v3,
                 const RateConstants& k, double ke0) {
  Deriv d;
  d.dc1 = (v2 * s.c2 * k.k21 + v3 * s.c3 * k.k31 - v1 * s.c1 * (k.k10 + k.k12 + k.k13) +
           u_mg_min) /
          v1;
  d.dc2 = (v1 * s.c1 * k.k12 - v2 * s.c2 * k.k21) / v2;
  d.dc3 = (v1 * s.c1 * k.k13 - v3 * s.c3 * k.k31) / v3;
  d.dce = ke0 * (s.c1 - s.ce);
  return d;
}

inline CompartmentState axpy(const CompartmentState& s, const Deriv& d, double h) {
  return {s.c1 + h * d.dc1, s.c2 + h * d.dc2, s.c3 + h * d.dc3, s.ce + h * d.dce};
}

}  // namespace detail

// Fixed-step RK4 over the three-compartment + effect-site system for one drug.
// Returns one state per record interval (state at the END of each interval);
// the state at t=0 is not emitted. Negative state components beyond clamp_tol
// abort; smaller excursions are clamped to zero.
inline std::vector<CompartmentState> integrate_compartments(
    double v1, double v2, double v3, const RateConstants& k, double ke0,
    const InfusionSchedule& u, double duration_s, const IntegrationOptions& opt = {},
    CompartmentState initial = {}) {
  require(opt.dt_s > 0.0, errc::domain_error, "dt must be positive");
  require(opt.record_every_s > 0.0, errc::domain_error, "record interval must be positive");
  require(duration_s >= 0.0, errc::domain_error, "negative duration");
  for (double r : u.rates_ug_per_s)
    require(r >= 0.0, errc::domain_error, "negative infusion rate");

  const double dt_min = opt.dt_s / 60.0;  // internal clock in minutes
  auto n_steps = static_cast<std::size_t>(std::llround(duration_s / opt.dt_s));
  auto record_stride = static_cast<std::size_t>(std::llround(opt.record_every_s / opt.dt_s));
  require(record_stride >= 1, errc::domain_error, "record interval below dt");

  std::vector<CompartmentState> out;
  out.reserve(n_steps / record_stride + 1);
  CompartmentState s = initial;
  for (std::size_t step = 0; step < n_steps; ++step) {
    double t0 = static_cast<double>(step) * opt.dt_s;
    // u is piecewise constant per source sample; mg/min = ug/s * 60 / 1000
    double u0 = u.rate_at(t0) * 0.06;
    double um = u.rate_at(t0 + opt.dt_s * 0.5) * 0.06;
    double u1 = u.rate_before(t0 + opt.dt_s) * 0.06;

    auto k1 = detail::rhs(s, u0, v1, v2, v3, k, ke0);
    auto k2 = detail::rhs(detail::axpy(s, k1, dt_min / 2.0), um, v1, v2, v3, k, ke0);
    auto k3 = detail::rhs(detail::axpy(s, k2, dt_min / 2.0), um, v1, v2, v3, k, ke0);
    auto k4 = detail::rhs(detail::axpy(s, k3, dt_min), u1, v1, v2, v3, k, ke0);

    s.c1 += dt_min / 6.0 * (k1.dc1 + 2 * k2.dc1 + 2 * k3.dc1 + k4.dc1);
    s.c2 += dt_min / 6.0 * (k1.dc2 + 2 * k2.dc2 + 2 * k3.dc2 + k4.dc2);
    s.c3 += dt_min / 6.0 * (k1.dc3 + 2 * k2.dc3 + 2 * k3.dc3 + k4.dc3);
    s.ce += dt_min / 6.0 * (k1.dce + 2 * k2.dce + 2 * k3.dce + k4.dce);

    for (double* c : {&s.c1, &s.c2, &s.c3, &s.ce}) {
      if (*c < 0.0) {
        require(*c >= -opt.clamp_tol, errc::negative_concentration,
                "state " + std::to_string(*c) + " at t=" + std::to_string(t0 + opt.dt_s) +
                    " s; reduce dt");
        *c = 0.0;
      }
    }
    if ((step + 1) % record_stride == 0) out.push_back(s);
  }
  return out;
}

// Patient-level convenience: derives parameters for `drug` and integrates.
inline std::vector<CompartmentState> integrate_case(const Patient& p, Drug drug,
                                                    const InfusionSchedule& u,
                                                    double duration_s,
                                                    const IntegrationOptions& opt = {}) {
  PkParams pk = derive_pk_params(p, drug);
  RateConstants k = derive_rate_constants(pk);
  return integrate_compartments(pk.v1, pk.v2, pk.v3, k, pk.ke0, u, duration_s, opt);
}

// Per-bin pseudo-BIS from paired infusion histories with explicit model
// parameters (synthetic-population generation perturbs these).
inline std::vector<double> pseudo_bis_with_params(
    const PkParams& pk_p, const PkParams& pk_r, const InfusionSchedule& propofol,
    const InfusionSchedule& remifentanil, double duration_s, const IntegrationOptions& opt = {},
    const PdParams& pd = {}) {
  require(propofol.resolution_s == remifentanil.resolution_s &&
              propofol.rates_ug_per_s.size() == remifentanil.rates_ug_per_s.size(),
          errc::misaligned_series, "drug schedules must share length and resolution");
  auto kp = derive_rate_constants(pk_p);
  auto kr = derive_rate_constants(pk_r);
  auto sp = integrate_compartments(pk_p.v1, pk_p.v2, pk_p.v3, kp, pk_p.ke0, propofol,
                                   duration_s, opt);
  auto sr = integrate_compartments(pk_r.v1, pk_r.v2, pk_r.v3, kr, pk_r.ke0, remifentanil,
                                   duration_s, opt);
  require(sp.size() == sr.size(), errc::misaligned_series, "integrator output mismatch");
  std::vector<double> bis(sp.size());
  for (std::size_t i = 0; i < sp.size(); ++i)
    bis[i] = response_surface_bis(sp[i].ce, sr[i].ce, pd);
  return bis;
}

// Per-bin pseudo-BIS for a patient under the stock Schnider/Minto parameters.
inline std::vector<double> pseudo_bis(const Patient& p, const InfusionSchedule& propofol,
                                      const InfusionSchedule& remifentanil, double duration_s,
                                      const IntegrationOptions& opt = {},
                                      const PdParams& pd = {}) {
  return pseudo_bis_with_params(derive_pk_params(p, Drug::propofol),
                                derive_pk_params(p, Drug::remifentanil), propofol, remifentanil,
                                duration_s, opt, pd);
}

}  // namespace doa::pkpd
