#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doa/common.hpp"
#include "doa/datapipe.hpp"
#include "doa/pkpd.hpp"

// Synthetic surgical cases: sampled patients, staged infusion schedules
// (induction bolus, stepped maintenance plateau, taper, recovery tail), and
// ground-truth BIS produced by the compartment simulator under per-case
// parameter perturbations plus measurement noise. Everything derives from
// (seed, case index), so parallel and serial generation agree byte for byte.
namespace doa::synth {

struct SynthConfig {
  std::size_t n_cases = 32;
  double duration_min_s = 1500.0;
  double duration_max_s = 3000.0;
  std::uint64_t seed = 42;
  double noise_sd = 1.5;       // BIS units
  double perturb_lo = 0.8;     // multiplicative parameter factor range
  double perturb_hi = 1.25;
  int age_min = 17, age_max = 82;                  // population table bounds
  double weight_min = 37.9, weight_max = 98.1;
  double height_min = 138.8, height_max = 186.6;

  void validate() const {
    require(n_cases >= 1, errc::config_error, "need at least one case");
    require(noise_sd >= 0.0, errc::config_error, "noise_sd must be non-negative");
    require(duration_min_s >= 600.0 && duration_max_s >= duration_min_s, errc::config_error,
            "duration range must be sane (>= 600 s)");
    require(perturb_lo > 0.0 && perturb_hi >= perturb_lo, errc::config_error,
            "perturbation factors must be positive");
  }
};

struct SynthCase {
  std::string case_id;
  pkpd::Patient patient;
  std::vector<double> ppf_dose;   // ug per second
  std::vector<double> rftn_dose;  // ug per second
  std::vector<double> bis;        // per second, noisy ground truth
};

inline pkpd::Patient sample_patient(const SynthConfig& cfg, Rng& rng) {
  for (int attempt = 0; attempt < 100; ++attempt) {
    pkpd::Patient p;
    p.age = static_cast<int>(rng.uniform_int(cfg.age_min, cfg.age_max));
    p.sex = rng.uniform01() < 0.5 ? pkpd::Sex::male : pkpd::Sex::female;
    p.weight = rng.uniform(cfg.weight_min, cfg.weight_max);
    p.height = rng.uniform(cfg.height_min, cfg.height_max);
    try {
      p.validate();
      pkpd::compute_lbm(p);
      pkpd::derive_pk_params(p, pkpd::Drug::propofol);
      pkpd::derive_pk_params(p, pkpd::Drug::remifentanil);
      return p;
    } catch (const Error&) {
      // resample physiologically inconsistent draws
    }
  }
  fail(errc::config_error, "could not sample a valid patient");
}

namespace detail {

// Population-level covariate response shared by every case of a generation
// run: each parameter slot gets fixed log-linear coefficients in the
// covariates, drawn once from the run seed. The per-case factor is this
// structured response times a case-random residual, clamped to the configured
// range. The structured part is what a learned model can recover on unseen
// patients; the residual is irreducible inter-patient variability.
struct FactorModel {
  struct Slot {
    double c_age, c_wgt, c_sex;
  };
  std::vector<Slot> slots;
  double lo, hi;

  static FactorModel make(const SynthConfig& cfg, std::size_t n_slots) {
    FactorModel fm;
    fm.lo = cfg.perturb_lo;
    fm.hi = cfg.perturb_hi;
    Rng pop = Rng(cfg.seed).fork(0xC0EFULL);
    fm.slots.resize(n_slots);
    for (auto& s : fm.slots) {
      s.c_age = pop.uniform(-0.10, 0.10);
      s.c_wgt = pop.uniform(-0.10, 0.10);
      s.c_sex = pop.uniform(-0.05, 0.05);
    }
    return fm;
  }

  double factor(std::size_t slot, const pkpd::Patient& p, Rng& case_rng) const {
    const Slot& s = slots[slot % slots.size()];
    double z_age = (static_cast<double>(p.age) - 49.5) / 18.8;
    double z_wgt = (p.weight - 68.0) / 17.4;
    double sex = p.sex == pkpd::Sex::male ? 1.0 : -1.0;
    double structured = std::exp(s.c_age * z_age + s.c_wgt * z_wgt + s.c_sex * sex);
    double residual = case_rng.uniform(0.93, 1.08);
    return std::clamp(structured * residual, lo, hi);
  }
};

inline pkpd::PkParams perturb(const pkpd::PkParams& pk, const FactorModel& fm,
                              std::size_t slot0, const pkpd::Patient& p, Rng& rng) {
  pkpd::PkParams out = pk;
  out.v1 *= fm.factor(slot0 + 0, p, rng);
  out.v2 *= fm.factor(slot0 + 1, p, rng);
  out.v3 *= fm.factor(slot0 + 2, p, rng);
  out.cl1 *= fm.factor(slot0 + 3, p, rng);
  out.cl2 *= fm.factor(slot0 + 4, p, rng);
  out.cl3 *= fm.factor(slot0 + 5, p, rng);
  out.ke0 *= fm.factor(slot0 + 6, p, rng);
  out.validate();
  return out;
}

}  // namespace detail

inline SynthCase generate_case(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).fork(index + 1);
  SynthCase sc;
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "SYN%04zu", index);
    sc.case_id = buf;
  }
  sc.patient = sample_patient(cfg, rng);
  const double wf = sc.patient.weight / 70.0;  // dose scaling with body mass

  auto duration = static_cast<std::size_t>(rng.uniform(cfg.duration_min_s, cfg.duration_max_s));
  std::size_t idle = static_cast<std::size_t>(rng.uniform_int(20, 60));
  std::size_t bolus_len = static_cast<std::size_t>(rng.uniform_int(20, 40));
  std::size_t tail = static_cast<std::size_t>(rng.uniform_int(300, 800));
  if (idle + bolus_len + 300 + tail + 2 > duration)
    tail = duration - (idle + bolus_len + 300 + 2);
  std::size_t t_stop = duration - tail - 1;  // last propofol second + 1
  std::size_t t_stop_r = t_stop - static_cast<std::size_t>(rng.uniform_int(0, 120));

  // 1.5-2.5 mg/kg propofol over the bolus window; remifentanil gets a lighter kick
  double bolus_ppf =
      sc.patient.weight * rng.uniform(1200.0, 2000.0) / static_cast<double>(bolus_len);
  double bolus_rftn =
      sc.patient.weight * rng.uniform(500.0, 1000.0) / static_cast<double>(bolus_len);
  double base_ppf = wf * rng.uniform(205.0, 265.0);
  double base_rftn = wf * rng.uniform(150.0, 225.0);

  sc.ppf_dose.assign(duration, 0.0);
  sc.rftn_dose.assign(duration, 0.0);
  double cur_ppf = base_ppf, cur_rftn = base_rftn;
  std::size_t next_change = idle + bolus_len + static_cast<std::size_t>(rng.uniform_int(180, 480));
  for (std::size_t t = idle; t < duration; ++t) {
    if (t >= next_change) {
      // stepped plateau: seeded rate changes every few minutes
      cur_ppf = std::clamp(cur_ppf * rng.uniform(0.85, 1.18), 0.7 * base_ppf, 1.3 * base_ppf);
      cur_rftn =
          std::clamp(cur_rftn * rng.uniform(0.85, 1.18), 0.7 * base_rftn, 1.3 * base_rftn);
      next_change = t + static_cast<std::size_t>(rng.uniform_int(180, 480));
    }
    if (t < idle + bolus_len) {
      sc.ppf_dose[t] = bolus_ppf;
      sc.rftn_dose[t] = bolus_rftn;
    } else {
      if (t < t_stop) sc.ppf_dose[t] = cur_ppf;
      if (t < t_stop_r) sc.rftn_dose[t] = cur_rftn;
    }
  }

  // ground truth from per-case perturbed parameters
  detail::FactorModel fm = detail::FactorModel::make(cfg, 16);
  pkpd::PkParams pk_p = detail::perturb(
      pkpd::derive_pk_params(sc.patient, pkpd::Drug::propofol), fm, 0, sc.patient, rng);
  pkpd::PkParams pk_r = detail::perturb(
      pkpd::derive_pk_params(sc.patient, pkpd::Drug::remifentanil), fm, 7, sc.patient, rng);
  pkpd::PdParams pd;
  pd.ec50p *= fm.factor(14, sc.patient, rng);
  pd.ec50r *= fm.factor(15, sc.patient, rng);

  pkpd::IntegrationOptions opt;
  opt.dt_s = 1.0;
  opt.record_every_s = 1.0;
  auto simulate = [&] {
    pkpd::InfusionSchedule up, ur;
    up.resolution_s = 1.0;
    up.rates_ug_per_s = sc.ppf_dose;  // 1 s doses are rates in ug/s
    ur.resolution_s = 1.0;
    ur.rates_ug_per_s = sc.rftn_dose;
    return pkpd::pseudo_bis_with_params(pk_p, pk_r, up, ur, static_cast<double>(duration), opt,
                                        pd);
  };

  // titration pass: clinicians steer toward a per-case target, so rescale the
  // maintenance rates once from the first simulation's plateau depth
  sc.bis = simulate();
  double bis_target = rng.uniform(36.0, 44.0);
  std::size_t plateau_from = idle + bolus_len + 300;
  if (plateau_from + 60 < t_stop) {
    double mean_bis = 0.0;
    std::size_t n_pl = 0;
    for (std::size_t t = plateau_from; t < t_stop; ++t) {
      mean_bis += sc.bis[t];
      ++n_pl;
    }
    mean_bis /= static_cast<double>(n_pl);
    mean_bis = std::clamp(mean_bis, 5.0, 95.0);
    auto s_of = [](double b) { return std::pow((98.0 - b) / b, 1.0 / 1.43); };
    double correction = std::clamp(s_of(bis_target) / s_of(mean_bis), 0.6, 1.8);
    for (std::size_t t = idle + bolus_len; t < duration; ++t) {
      sc.ppf_dose[t] *= correction;
      sc.rftn_dose[t] *= correction;
    }
    sc.bis = simulate();
  }

  for (double& b : sc.bis) {
    b += cfg.noise_sd > 0.0 ? rng.normal(0.0, cfg.noise_sd) : 0.0;
    b = std::clamp(b, 0.0, 100.0);
  }
  return sc;
}

inline std::string to_csv(const SynthCase& sc) {
  std::string out = "# case_id=" + sc.case_id + " age=" + std::to_string(sc.patient.age) +
                    " sex=" + pkpd::sex_name(sc.patient.sex);
  char buf[128];
  std::snprintf(buf, sizeof(buf), " weight=%.17g height=%.17g\n", sc.patient.weight,
                sc.patient.height);
  out += buf;
  out += "t,ppf_dose,rftn_dose,bis\n";
  for (std::size_t t = 0; t < sc.bis.size(); ++t) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g\n", t, sc.ppf_dose[t],
                  sc.rftn_dose[t], sc.bis[t]);
    out += buf;
  }
  return out;
}

// Writes case_<id>.csv files (atomically) into `dir`; returns the paths.
inline std::vector<std::filesystem::path> write_case_files(const SynthConfig& cfg,
                                                           const std::filesystem::path& dir) {
  cfg.validate();
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < cfg.n_cases; ++i) {
    SynthCase sc = generate_case(cfg, i);
    std::filesystem::path p = dir / (sc.case_id + ".csv");
    std::filesystem::path tmp = p;
    tmp += ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary);
      require(os.good(), errc::io_error, "cannot write " + tmp.string());
      os << to_csv(sc);
    }
    std::filesystem::rename(tmp, p);
    paths.push_back(p);
  }
  return paths;
}

}  // namespace doa::synth
