// Command-line front end: synthesize cases, ingest them into a dataset,
// train, predict (batch or streaming), evaluate, and emit plot-ready CSVs.
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "doa/common.hpp"
#include "doa/pipeline.hpp"
#include "doa/synth.hpp"

namespace fs = std::filesystem;
using doa::Error;
using doa::errc;

namespace {

// Exit codes: 0 success, 2 configuration, 3 I/O, 4 data rejection/content,
// 5 numeric failure, 6 internal.
int exit_code_for(errc c) {
  switch (c) {
    case errc::config_error:
      return 2;
    case errc::io_error:
      return 3;
    case errc::empty_case:
    case errc::missing_norms:
    case errc::missing_anchor:
    case errc::out_of_range_target:
    case errc::empty_density:
    case errc::series_too_short:
    case errc::zero_true_value:
    case errc::degenerate_series:
    case errc::window_exceeds_series:
    case errc::misaligned_series:
      return 4;
    case errc::non_finite_input:
    case errc::non_finite_loss:
    case errc::negative_concentration:
    case errc::non_positive_lbm:
    case errc::non_positive_parameter:
    case errc::domain_error:
      return 5;
    default:
      return 6;
  }
}

std::string json_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\')
      out += std::string("\\") + c;
    else if (c == '\n')
      out += "\\n";
    else
      out += c;
  }
  return out;
}

void report_error(const std::string& kind, const std::string& message) {
  std::cerr << "{\"error\": \"" << json_escape(kind) << "\", \"message\": \""
            << json_escape(message) << "\"}\n";
}

void echo_config(const CLI::App& app, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  auto text = app.config_to_str(true, true);
  doa::pipeline::write_text_atomic(out_dir / "effective_config.ini", text);
}

struct PredSource {
  std::string method;
  fs::path dir;
};

std::vector<PredSource> parse_pred_sources(const std::vector<std::string>& specs) {
  std::vector<PredSource> out;
  for (const auto& s : specs) {
    auto eq = s.find('=');
    doa::require(eq != std::string::npos && eq > 0 && eq + 1 < s.size(), errc::config_error,
                 "--pred expects NAME=DIR, got '" + s + "'");
    out.push_back({s.substr(0, eq), fs::path(s.substr(eq + 1))});
  }
  doa::require(!out.empty(), errc::config_error, "at least one --pred NAME=DIR is required");
  return out;
}

std::vector<doa::pipeline::CasePredictions> load_prediction_dir(const fs::path& dir) {
  std::vector<fs::path> files;
  doa::require(fs::exists(dir), errc::io_error, "no such prediction directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".csv" &&
        e.path().filename() != "latency.csv")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  doa::require(!files.empty(), errc::io_error, "no prediction files in " + dir.string());
  std::vector<doa::pipeline::CasePredictions> out;
  for (const auto& f : files) out.push_back(doa::pipeline::read_predictions_csv(f));
  return out;
}

std::vector<std::size_t> split_case_indices(const doa::datapipe::Dataset& ds,
                                            const std::string& split) {
  std::vector<std::size_t> out;
  for (const auto& id : ds.split(split)) {
    int ci = ds.case_index_of(id);
    doa::require(ci >= 0, errc::config_error, "split references unknown case " + id);
    out.push_back(static_cast<std::size_t>(ci));
  }
  doa::require(!out.empty(), errc::config_error, "split '" + split + "' is empty");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"depth-of-anesthesia prediction toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from an INI file");

  const char* env_data = std::getenv("DOA_DATA_DIR");
  std::string default_data_dir = env_data ? env_data : "";

  std::uint64_t seed = 42;
  std::size_t jobs = 1;
  app.add_option("--seed", seed, "global random seed")->capture_default_str();
  app.add_option("--jobs", jobs, "worker threads for per-case stages")->capture_default_str();

  // ---- synth ----
  auto* c_synth = app.add_subcommand("synth", "generate synthetic case CSVs")->fallthrough();
  doa::synth::SynthConfig synth_cfg;
  std::string synth_out = default_data_dir;
  c_synth->add_option("--out", synth_out, "output directory for case files")
      ->required(default_data_dir.empty());
  c_synth->add_option("--cases", synth_cfg.n_cases, "number of cases")->capture_default_str();
  c_synth->add_option("--duration-min", synth_cfg.duration_min_s, "minimum case length (s)")
      ->capture_default_str();
  c_synth->add_option("--duration-max", synth_cfg.duration_max_s, "maximum case length (s)")
      ->capture_default_str();
  c_synth->add_option("--noise-sd", synth_cfg.noise_sd, "BIS measurement noise SD")
      ->capture_default_str();
  c_synth->add_option("--perturb-lo", synth_cfg.perturb_lo, "parameter factor lower bound")
      ->capture_default_str();
  c_synth->add_option("--perturb-hi", synth_cfg.perturb_hi, "parameter factor upper bound")
      ->capture_default_str();

  // ---- ingest ----
  auto* c_ingest = app.add_subcommand("ingest", "clean and window case CSVs into a dataset")->fallthrough();
  std::string ingest_data = default_data_dir;
  std::string ingest_out;
  doa::pipeline::IngestOptions ingest_opt;
  c_ingest->add_option("--data", ingest_data, "directory of case CSVs")
      ->required(default_data_dir.empty());
  c_ingest->add_option("--out", ingest_out, "output directory")->required();
  c_ingest->add_option("--train-frac", ingest_opt.train_frac)->capture_default_str();
  c_ingest->add_option("--val-frac", ingest_opt.val_frac)->capture_default_str();
  c_ingest->add_option("--test-frac", ingest_opt.test_frac)->capture_default_str();
  c_ingest->add_option("--lowess-frac", ingest_opt.lowess_frac)->capture_default_str();
  c_ingest->add_option("--sigma", ingest_opt.kernel_sigma, "label smoothing kernel sigma")
      ->capture_default_str();
  c_ingest->add_option("--radius", ingest_opt.kernel_radius, "label smoothing kernel radius")
      ->capture_default_str();
  c_ingest->add_option("--weight-cap", ingest_opt.weight_cap)->capture_default_str();

  // ---- train ----
  auto* c_train = app.add_subcommand("train", "fit the model on a dataset")->fallthrough();
  std::string train_dataset, train_out, warm_start;
  doa::nn::ModelConfig model_cfg;
  doa::nn::FitHyper hyper;
  bool no_reweight = false;
  c_train->add_option("--dataset", train_dataset, "dataset file from ingest")->required();
  c_train->add_option("--out", train_out, "model output file")->required();
  c_train->add_option("--epochs", hyper.epochs)->capture_default_str();
  c_train->add_option("--batch-size", hyper.batch_size)->capture_default_str();
  c_train->add_option("--lr", hyper.lr)->capture_default_str();
  c_train->add_option("--lr-decay", hyper.lr_decay)->capture_default_str();
  c_train->add_option("--decay-every", hyper.decay_every)->capture_default_str();
  c_train->add_option("--lambda-h", hyper.lambda_h)->capture_default_str();
  c_train->add_option("--lambda-w", hyper.lambda_w)->capture_default_str();
  c_train->add_option("--stride", hyper.sample_stride, "train on every Nth second")
      ->capture_default_str();
  c_train->add_flag("--no-reweight", no_reweight, "disable loss reweighting");
  c_train->add_option("--warm-start", warm_start, "existing model to fine-tune");
  c_train->add_option("--lstm-hidden", model_cfg.lstm_hidden)->capture_default_str();
  c_train->add_option("--grn-hidden", model_cfg.grn_hidden)->capture_default_str();
  c_train->add_option("--heads", model_cfg.num_heads)->capture_default_str();
  c_train->add_option("--dropout", model_cfg.dropout_rate, "training dropout rate")
      ->capture_default_str();
  std::vector<std::size_t> bottleneck;
  c_train->add_option("--bottleneck", bottleneck, "three bottleneck widths (last must be 1)")
      ->expected(3);

  // ---- predict ----
  auto* c_predict = app.add_subcommand("predict", "write per-case prediction CSVs")->fallthrough();
  std::string pr_dataset, pr_model, pr_out, pr_split = "test";
  std::uint32_t pr_stride = 1;
  bool pr_stream = false;
  c_predict->add_option("--dataset", pr_dataset)->required();
  c_predict->add_option("--model", pr_model)->required();
  c_predict->add_option("--out", pr_out)->required();
  c_predict->add_option("--split", pr_split, "train|val|test")->capture_default_str();
  c_predict->add_option("--stride", pr_stride, "predict every Nth second")
      ->capture_default_str();
  c_predict->add_flag("--stream", pr_stream,
                      "one prediction per input second with per-step timing");

  // ---- baseline-pkpd ----
  auto* c_base = app.add_subcommand("baseline-pkpd", "PK-PD-only predictions for comparison")->fallthrough();
  std::string bl_dataset, bl_out, bl_split = "test";
  std::uint32_t bl_stride = 1;
  c_base->add_option("--dataset", bl_dataset)->required();
  c_base->add_option("--out", bl_out)->required();
  c_base->add_option("--split", bl_split)->capture_default_str();
  c_base->add_option("--stride", bl_stride)->capture_default_str();

  // ---- evaluate ----
  auto* c_eval = app.add_subcommand("evaluate", "metric reports from prediction directories")->fallthrough();
  std::string ev_dataset, ev_out;
  std::vector<std::string> ev_preds;
  bool ev_bootstrap = false;
  c_eval->add_option("--dataset", ev_dataset)->required();
  c_eval->add_option("--out", ev_out)->required();
  c_eval->add_option("--pred", ev_preds, "prediction source as NAME=DIR (repeatable)")
      ->required();
  c_eval->add_flag("--ccc-bootstrap", ev_bootstrap,
                   "add a bootstrap CCC interval cross-check");

  // ---- plot-data ----
  auto* c_plot = app.add_subcommand("plot-data", "figure-ready joined CSVs")->fallthrough();
  std::string pl_dataset, pl_out;
  std::vector<std::string> pl_preds;
  c_plot->add_option("--dataset", pl_dataset)->required();
  c_plot->add_option("--out", pl_out)->required();
  c_plot->add_option("--pred", pl_preds, "prediction source as NAME=DIR (repeatable)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    if (rc == 0) return 0;
    report_error("ConfigError", std::string("command line: ") + e.what());
    return 2;
  }

  try {
    if (c_synth->parsed()) {
      doa::require(!synth_out.empty(), errc::config_error,
                   "--out (or DOA_DATA_DIR) is required");
      synth_cfg.seed = seed;
      synth_cfg.validate();
      fs::create_directories(synth_out);
      // per-case seeding keeps parallel and serial output byte-identical
      doa::pipeline::parallel_for(synth_cfg.n_cases, jobs, [&](std::size_t i) {
        auto sc = doa::synth::generate_case(synth_cfg, i);
        doa::pipeline::write_text_atomic(fs::path(synth_out) / (sc.case_id + ".csv"),
                                         doa::synth::to_csv(sc));
      });
      echo_config(app, synth_out);
      std::cout << "wrote " << synth_cfg.n_cases << " cases to " << synth_out << "\n";
      return 0;
    }

    if (c_ingest->parsed()) {
      doa::require(!ingest_data.empty(), errc::config_error,
                   "--data (or DOA_DATA_DIR) is required");
      ingest_opt.seed = seed;
      ingest_opt.jobs = jobs;
      doa::datapipe::Dataset ds;
      auto report = doa::pipeline::ingest_directory(ingest_data, ingest_opt, ds);
      fs::create_directories(ingest_out);
      doa::datapipe::save_dataset_file(ds, fs::path(ingest_out) / "dataset.bin");
      doa::pipeline::write_text_atomic(fs::path(ingest_out) / "dataset.json",
                                       doa::pipeline::dataset_sidecar_json(ds));
      doa::pipeline::write_text_atomic(
          fs::path(ingest_out) / "weight_table.csv",
          doa::imbalance::weight_table_csv(ds.density, ds.weights));
      std::string rej = "case_id,reason,detail\n";
      for (const auto& r : report.rejected)
        rej += r.case_id + "," + doa::datapipe::rejection_name(r.reason) + ",\"" + r.detail +
               "\"\n";
      doa::pipeline::write_text_atomic(fs::path(ingest_out) / "rejections.csv", rej);
      echo_config(app, ingest_out);
      std::cout << "accepted " << report.accepted << " cases, rejected "
                << report.rejected.size() << "; splits " << ds.split_train.size() << "/"
                << ds.split_val.size() << "/" << ds.split_test.size() << "\n";
      return 0;
    }

    if (c_train->parsed()) {
      auto ds = doa::datapipe::load_dataset_file(train_dataset);
      if (!bottleneck.empty())
        model_cfg.bottleneck = {bottleneck[0], bottleneck[1], bottleneck[2]};
      model_cfg.seq_len = doa::datapipe::kWindowBins;
      hyper.seed = seed;
      hyper.reweight = !no_reweight;
      std::optional<doa::nn::TrainedModel> warm;
      if (!warm_start.empty()) warm = doa::nn::load_model_file(warm_start);
      auto result = doa::nn::fit(ds, model_cfg, hyper, warm, &std::cout);
      fs::path out_path(train_out);
      if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
      doa::nn::save_model_file(result.model, out_path);
      std::string log = "epoch,lr,objective,l_h,l_w\n";
      char buf[160];
      for (const auto& e : result.log) {
        std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g,%.10g\n", e.epoch, e.lr,
                      e.objective, e.l_h, e.l_w);
        log += buf;
      }
      fs::path log_path = out_path;
      log_path.replace_extension(".loss_log.csv");
      doa::pipeline::write_text_atomic(log_path, log);
      if (out_path.has_parent_path()) echo_config(app, out_path.parent_path());
      std::cout << "model written to " << train_out << "\n";
      return 0;
    }

    if (c_predict->parsed()) {
      auto ds = doa::datapipe::load_dataset_file(pr_dataset);
      auto model = doa::nn::load_model_file(pr_model);
      auto indices = split_case_indices(ds, pr_split);
      fs::create_directories(pr_out);
      if (pr_stream) {
        std::vector<double> all_latencies;
        for (std::size_t ci : indices) {
          const auto& cs = ds.cases[ci];
          std::vector<doa::datapipe::SampleRef> refs;
          for (std::uint32_t t = 0; t + 1 < cs.bis.size(); t += pr_stride)
            refs.push_back({static_cast<std::uint32_t>(ci), t});
          auto sr = doa::nn::predict_stream(model, ds, refs);
          doa::pipeline::CasePredictions cp;
          cp.case_id = cs.case_id;
          for (std::size_t i = 0; i < refs.size(); ++i) {
            cp.seconds.push_back(static_cast<int>(refs[i].t) + 1);
            cp.truth.push_back(cs.bis[refs[i].t + 1]);
            cp.predicted.push_back(sr.predictions[i]);
          }
          doa::pipeline::write_text_atomic(fs::path(pr_out) / (cs.case_id + ".csv"),
                                           doa::pipeline::predictions_csv(cp));
          all_latencies.insert(all_latencies.end(), sr.latencies_s.begin(),
                               sr.latencies_s.end());
        }
        std::sort(all_latencies.begin(), all_latencies.end());
        double median = all_latencies[all_latencies.size() / 2];
        std::string lat = "metric,seconds\n";
        char buf[96];
        std::snprintf(buf, sizeof(buf), "median,%.6f\nmax,%.6f\nn,%zu\n", median,
                      all_latencies.back(), all_latencies.size());
        lat += buf;
        doa::pipeline::write_text_atomic(fs::path(pr_out) / "latency.csv", lat);
        std::cout << "median per-step latency: " << median << " s over "
                  << all_latencies.size() << " steps\n";
      } else {
        doa::pipeline::parallel_for(indices.size(), jobs, [&](std::size_t k) {
          auto cp = doa::pipeline::predict_case(model, ds, indices[k], pr_stride);
          doa::pipeline::write_text_atomic(fs::path(pr_out) / (cp.case_id + ".csv"),
                                           doa::pipeline::predictions_csv(cp));
        });
      }
      echo_config(app, pr_out);
      std::cout << "predictions for " << indices.size() << " cases in " << pr_out << "\n";
      return 0;
    }

    if (c_base->parsed()) {
      auto ds = doa::datapipe::load_dataset_file(bl_dataset);
      auto indices = split_case_indices(ds, bl_split);
      fs::create_directories(bl_out);
      for (std::size_t ci : indices) {
        auto cp = doa::pipeline::baseline_case(ds, ci, bl_stride);
        doa::pipeline::write_text_atomic(fs::path(bl_out) / (cp.case_id + ".csv"),
                                         doa::pipeline::predictions_csv(cp));
      }
      echo_config(app, bl_out);
      std::cout << "baseline predictions for " << indices.size() << " cases in " << bl_out
                << "\n";
      return 0;
    }

    if (c_eval->parsed()) {
      auto ds = doa::datapipe::load_dataset_file(ev_dataset);
      auto sources = parse_pred_sources(ev_preds);
      std::vector<doa::pipeline::MethodEvaluation> evs;
      std::vector<std::vector<doa::pipeline::CasePredictions>> all_preds;
      for (const auto& src : sources) {
        auto preds = load_prediction_dir(src.dir);
        evs.push_back(doa::pipeline::evaluate_method(src.method, preds, ds));
        all_preds.push_back(std::move(preds));
      }
      fs::create_directories(ev_out);
      doa::pipeline::write_text_atomic(fs::path(ev_out) / "metrics_cases.csv",
                                       doa::pipeline::per_case_csv(evs));
      doa::pipeline::write_text_atomic(fs::path(ev_out) / "summary.csv",
                                       doa::pipeline::summary_csv(evs));
      for (std::size_t m = 0; m < evs.size(); ++m)
        doa::pipeline::write_text_atomic(
            fs::path(ev_out) / ("binned_error_" + evs[m].method + ".csv"),
            doa::pipeline::binned_error_csv(evs[m]));
      if (ev_bootstrap) {
        std::string boot = "method,ccc,ci_lower,ci_upper\n";
        for (std::size_t m = 0; m < evs.size(); ++m) {
          std::vector<double> ap, at;
          for (const auto& cp : all_preds[m]) {
            ap.insert(ap.end(), cp.predicted.begin(), cp.predicted.end());
            at.insert(at.end(), cp.truth.begin(), cp.truth.end());
          }
          auto cb = doa::metrics::ccc_bootstrap(ap, at, 500, seed);
          char buf[128];
          std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f\n", evs[m].method.c_str(), cb.ccc,
                        cb.ci_lower, cb.ci_upper);
          boot += buf;
        }
        doa::pipeline::write_text_atomic(fs::path(ev_out) / "ccc_bootstrap.csv", boot);
      }
      echo_config(app, ev_out);
      std::cout << doa::pipeline::summary_csv(evs);
      return 0;
    }

    if (c_plot->parsed()) {
      auto ds = doa::datapipe::load_dataset_file(pl_dataset);
      auto sources = parse_pred_sources(pl_preds);
      std::vector<std::string> methods;
      std::vector<std::vector<doa::pipeline::CasePredictions>> all_preds;
      std::vector<doa::pipeline::MethodEvaluation> evs;
      for (const auto& src : sources) {
        methods.push_back(src.method);
        auto preds = load_prediction_dir(src.dir);
        evs.push_back(doa::pipeline::evaluate_method(src.method, preds, ds));
        all_preds.push_back(std::move(preds));
      }
      fs::create_directories(fs::path(pl_out) / "cases");
      for (const auto& cp : all_preds[0]) {
        auto csv = doa::pipeline::joined_series_csv(ds, cp.case_id, all_preds, methods);
        doa::pipeline::write_text_atomic(fs::path(pl_out) / "cases" / (cp.case_id + ".csv"),
                                         csv);
      }
      doa::pipeline::write_text_atomic(fs::path(pl_out) / "label_density.csv",
                                       doa::pipeline::label_density_csv(ds));
      for (std::size_t m = 0; m < evs.size(); ++m)
        doa::pipeline::write_text_atomic(
            fs::path(pl_out) / ("binned_error_" + evs[m].method + ".csv"),
            doa::pipeline::binned_error_csv(evs[m]));
      echo_config(app, pl_out);
      std::cout << "plot data in " << pl_out << "\n";
      return 0;
    }
  } catch (const Error& e) {
    report_error(doa::errc_name(e.code()), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    report_error("Internal", e.what());
    return 6;
  }
  report_error("ConfigError", "no subcommand given");
  return 2;
}
