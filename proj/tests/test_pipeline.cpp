#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doa/common.hpp"
#include "doa/pipeline.hpp"
#include "doa/synth.hpp"

namespace fs = std::filesystem;
using namespace doa;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

fs::path synth_cases(const std::string& name, std::size_t n = 6) {
  synth::SynthConfig cfg;
  cfg.n_cases = n;
  cfg.duration_min_s = 900;
  cfg.duration_max_s = 1300;
  fs::path dir = fresh_dir(name);
  synth::write_case_files(cfg, dir);
  return dir;
}

}  // namespace

TEST_CASE("parallel_for covers every index once and propagates exceptions") {
  std::vector<std::atomic<int>> hits(97);
  pipeline::parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i].fetch_add(1); });
  for (const auto& h : hits) CHECK(h.load() == 1);
  CHECK_THROWS_AS(pipeline::parallel_for(
                      8, 3,
                      [](std::size_t i) {
                        if (i == 5) fail(errc::io_error, "boom");
                      }),
                  Error);
}

TEST_CASE("ingest_directory builds a complete dataset") {
  fs::path dir = synth_cases("doa_pipe_ingest");
  pipeline::IngestOptions opt;
  opt.seed = 42;
  opt.jobs = 2;
  datapipe::Dataset ds;
  auto report = pipeline::ingest_directory(dir, opt, ds);
  CHECK(report.accepted == 6);
  CHECK(report.rejected.empty());
  CHECK(ds.split_train.size() + ds.split_val.size() + ds.split_test.size() == 6);
  CHECK(!ds.split_train.empty());
  for (const auto& cs : ds.cases) {
    CHECK(cs.pseudo_bis.size() == cs.bins.size());
    CHECK(cs.bis_label.size() == cs.bis.size());
  }
  // training labels are smoothed (differ from raw almost surely with noise)
  int ci = ds.case_index_of(ds.split_train[0]);
  const auto& tr = ds.cases[static_cast<std::size_t>(ci)];
  bool smoothed = false;
  for (std::size_t i = 0; i < tr.bis.size(); ++i)
    if (tr.bis[i] != tr.bis_label[i]) smoothed = true;
  CHECK(smoothed);
  // val/test labels stay raw
  if (!ds.split_test.empty()) {
    const auto& te = ds.cases[static_cast<std::size_t>(ds.case_index_of(ds.split_test[0]))];
    CHECK(te.bis == te.bis_label);
  }
  // weight table is normalized over occupied bins
  double min_occ = 1e300;
  for (std::size_t b = 0; b < imbalance::kNumBins; ++b)
    if (ds.density.smoothed[b] > 0.0) min_occ = std::min(min_occ, ds.weights.w[b]);
  CHECK(min_occ == doctest::Approx(1.0));
  fs::remove_all(dir);
}

TEST_CASE("ingest rejects and logs bad cases without dying") {
  fs::path dir = synth_cases("doa_pipe_reject", 3);
  {
    std::ofstream os(dir / "broken.csv");
    os << "# case_id=BROKEN age=50 sex=male weight=70 height=170\n";
    os << "t,ppf_dose,rftn_dose,bis\n";
    for (int t = 0; t < 80; ++t) os << t << ",0,0,95\n";  // no propofol: partial
  }
  pipeline::IngestOptions opt;
  datapipe::Dataset ds;
  auto report = pipeline::ingest_directory(dir, opt, ds);
  CHECK(report.accepted == 3);
  REQUIRE(report.rejected.size() == 1);
  CHECK(report.rejected[0].case_id == "BROKEN");
  CHECK(report.rejected[0].reason == datapipe::CaseRejection::Reason::partial);
  fs::remove_all(dir);
}

TEST_CASE("sidecar JSON carries normalization and splits") {
  fs::path dir = synth_cases("doa_pipe_json", 4);
  pipeline::IngestOptions opt;
  datapipe::Dataset ds;
  pipeline::ingest_directory(dir, opt, ds);
  std::string json = pipeline::dataset_sidecar_json(ds);
  CHECK(json.find("\"normalization\"") != std::string::npos);
  CHECK(json.find("\"splits\"") != std::string::npos);
  for (const auto& id : ds.split_train) CHECK(json.find(id) != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("baseline predictions align with target seconds") {
  fs::path dir = synth_cases("doa_pipe_base", 3);
  pipeline::IngestOptions opt;
  datapipe::Dataset ds;
  pipeline::ingest_directory(dir, opt, ds);
  auto cp = pipeline::baseline_case(ds, 0, 10);
  const auto& cs = ds.cases[0];
  REQUIRE(!cp.seconds.empty());
  for (std::size_t i = 0; i < cp.seconds.size(); ++i) {
    int t = cp.seconds[i];
    CHECK(cp.truth[i] == cs.bis[static_cast<std::size_t>(t)]);
    auto bin = std::min(cs.pseudo_bis.size() - 1,
                        static_cast<std::size_t>(t) / datapipe::kBinSeconds);
    CHECK(cp.predicted[i] == cs.pseudo_bis[bin]);
  }
  fs::remove_all(dir);
}

TEST_CASE("prediction CSV round trip") {
  pipeline::CasePredictions cp;
  cp.case_id = "RT01";
  cp.seconds = {1, 5, 9};
  cp.truth = {97.25, 80.5, 61.125};
  cp.predicted = {96.5, 79.875, 60.0625};
  fs::path dir = fresh_dir("doa_pipe_csv");
  pipeline::write_text_atomic(dir / "RT01.csv", pipeline::predictions_csv(cp));
  auto back = pipeline::read_predictions_csv(dir / "RT01.csv");
  CHECK(back.case_id == "RT01");
  CHECK(back.seconds == cp.seconds);
  CHECK(back.truth == cp.truth);
  CHECK(back.predicted == cp.predicted);
  fs::remove_all(dir);
}

TEST_CASE("summary table has every period, metric, and method column") {
  fs::path dir = synth_cases("doa_pipe_summary", 4);
  pipeline::IngestOptions opt;
  opt.train_frac = 0.5;
  opt.val_frac = 0.25;
  opt.test_frac = 0.25;
  datapipe::Dataset ds;
  pipeline::ingest_directory(dir, opt, ds);
  std::vector<pipeline::CasePredictions> preds;
  for (const auto& id : ds.split_test)
    preds.push_back(
        pipeline::baseline_case(ds, static_cast<std::size_t>(ds.case_index_of(id))));
  auto ev = pipeline::evaluate_method("pkpd", preds, ds);
  auto csv = pipeline::summary_csv({ev});
  std::istringstream ss(csv);
  std::string line;
  std::getline(ss, line);
  CHECK(line == "period,metric,pkpd");
  std::size_t rows = 0;
  while (std::getline(ss, line)) ++rows;
  CHECK(rows == 13);  // 4 periods x 3 metrics + ccc
  auto bcsv = pipeline::binned_error_csv(ev);
  std::size_t nlines = 0;
  for (char c : bcsv)
    if (c == '\n') ++nlines;
  CHECK(nlines == 102);  // header + 101 bins
  fs::remove_all(dir);
}

TEST_CASE("joined series CSV includes every method column") {
  fs::path dir = synth_cases("doa_pipe_join", 3);
  pipeline::IngestOptions opt;
  datapipe::Dataset ds;
  pipeline::ingest_directory(dir, opt, ds);
  std::vector<std::vector<pipeline::CasePredictions>> preds(2);
  preds[0].push_back(pipeline::baseline_case(ds, 0, 7));
  preds[1].push_back(pipeline::baseline_case(ds, 0, 13));
  auto csv =
      pipeline::joined_series_csv(ds, ds.cases[0].case_id, preds, {"alpha", "beta"});
  CHECK(csv.rfind("t,true_bis,alpha,beta\n", 0) == 0);
  std::size_t rows = 0;
  for (char c : csv)
    if (c == '\n') ++rows;
  CHECK(rows == ds.cases[0].bis.size() + 1);
  fs::remove_all(dir);
}
