#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "doa/common.hpp"
#include "doa/datapipe.hpp"
#include "doa/imbalance.hpp"
#include "doa/nn.hpp"

namespace doa::nn {

struct FitHyper {
  std::size_t batch_size = 1024;
  double lr = 0.03;
  double lr_decay = 0.1;         // multiplier applied every decay_every epochs
  std::size_t decay_every = 10;
  std::size_t epochs = 30;
  double lambda_h = 5.0;
  double lambda_w = 10.0;
  std::uint64_t seed = 0;
  bool reweight = true;
  std::uint32_t sample_stride = 1;

  double lr_at(std::size_t epoch) const {
    return lr * std::pow(lr_decay, static_cast<double>(epoch / decay_every));
  }
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double objective = 0.0;  // mean over batches
  double l_h = 0.0;
  double l_w = 0.0;
};

struct FitResult {
  TrainedModel model;
  std::vector<EpochLog> log;
};

// One materialized batch of normalized inputs plus raw-scale labels.
struct BatchArrays {
  Array ppf, rftn, pbis;  // [B,T]
  Array statics;          // [B,4]
  Array y_hist;           // [B,T] raw BIS
  Array y_target;         // [B]   raw BIS
  Array weights;          // [B]
};

inline BatchArrays materialize_batch(const datapipe::Dataset& ds,
                                     std::span<const datapipe::SampleRef> refs,
                                     const datapipe::Normalization& nz,
                                     const imbalance::WeightTable* wt) {
  const std::size_t B = refs.size();
  const std::size_t T = datapipe::kWindowBins;
  BatchArrays b;
  b.ppf = Array::uninit({B, T});
  b.rftn = Array::uninit({B, T});
  b.pbis = Array::uninit({B, T});
  b.statics = Array::uninit({B, 4});
  b.y_hist = Array::uninit({B, T});
  b.y_target = Array::uninit({B});
  b.weights = Array::uninit({B});
  datapipe::SampleWindow w;
  for (std::size_t i = 0; i < B; ++i) {
    const auto& ref = refs[i];
    datapipe::fill_window(ds.cases[ref.case_index], ref.t, nz, wt, w);
    for (std::size_t j = 0; j < T; ++j) {
      b.ppf[i * T + j] = w.ppf[j];
      b.rftn[i * T + j] = w.rftn[j];
      b.pbis[i * T + j] = w.pseudo[j];
      b.y_hist[i * T + j] = w.y_hist[j];
    }
    for (std::size_t j = 0; j < 4; ++j) b.statics[i * 4 + j] = w.statics[j];
    b.y_target[i] = w.y_target;
    b.weights[i] = w.weight;
  }
  return b;
}

namespace detail {

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;

  void init(const ModelWeights& w) {
    m.clear();
    v.clear();
    for (const auto& [name, arr] : w.params) {
      m.emplace_back(arr.size(), 0.0);
      v.emplace_back(arr.size(), 0.0);
    }
  }

  void step(ModelWeights& w, const std::vector<const Array*>& grads, double lr) {
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t p = 0; p < w.params.size(); ++p) {
      Array& theta = w.params[p].second;
      const Array& g = *grads[p];
      auto& mp = m[p];
      auto& vp = v[p];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        double gi = g[i];
        mp[i] = beta1 * mp[i] + (1.0 - beta1) * gi;
        vp[i] = beta2 * vp[i] + (1.0 - beta2) * gi * gi;
        double mhat = mp[i] / bc1;
        double vhat = vp[i] / bc2;
        theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

}  // namespace detail

// Graph-side losses on the raw BIS scale. Returns (objective, l_h, l_w) vars.
struct LossVars {
  Var objective, l_h, l_w, pred_raw, y_hat_raw;
};

inline LossVars batch_loss(Graph& g, const BatchArrays& batch, const WeightVars& wv,
                           const ModelConfig& cfg, const datapipe::Normalization& nz,
                           double lambda_h, double lambda_w, bool full_attention = false,
                           const DropoutCtx& drop = {}) {
  Var ppf = g.constant(batch.ppf);
  Var rftn = g.constant(batch.rftn);
  Var pbis = g.constant(batch.pbis);
  Var statics = g.constant(batch.statics);
  ForwardOut out =
      model_forward(g, ppf, rftn, pbis, statics, wv, cfg, full_attention, drop);

  Var pred_raw = g.add_scalar(g.mul_scalar(out.pred_norm, nz.bis_scale), nz.bis_mean);
  Var y_hat_raw = g.add_scalar(g.mul_scalar(out.y_hat_norm, nz.bis_scale), nz.bis_mean);

  Var hist_err = g.sub(y_hat_raw, g.constant(batch.y_hist));
  Var l_h = g.mean_all(g.mul(hist_err, hist_err));

  Var pred_err = g.sub(pred_raw, g.constant(batch.y_target));
  Var l_w = g.mean_all(g.mul(g.constant(batch.weights), g.mul(pred_err, pred_err)));

  Var obj = g.add(g.mul_scalar(l_h, lambda_h), g.mul_scalar(l_w, lambda_w));
  return {obj, l_h, l_w, pred_raw, y_hat_raw};
}

// Adam training of the combined objective over the training split.
// Deterministic in (seed, dataset, config): batch order, init, and updates are
// all driven by the seed.
inline FitResult fit(const datapipe::Dataset& ds, const ModelConfig& cfg, const FitHyper& hyper,
                     const std::optional<TrainedModel>& warm_start = std::nullopt,
                     std::ostream* progress = nullptr) {
  cfg.validate();
  require(hyper.batch_size >= 1 && hyper.epochs >= 1, errc::config_error,
          "batch_size and epochs must be >= 1");
  require(!ds.split_train.empty(), errc::config_error, "training split is empty");

  TrainedModel model;
  if (warm_start) {
    model = *warm_start;
    // fine-tuning keeps the original feature scaling
  } else {
    model.config = cfg;
    model.norms = ds.norms;
    model.weights = init_weights(cfg, hyper.seed);
  }
  require(model.config.seq_len == datapipe::kWindowBins, errc::config_error,
          "model sequence length must match the dataset window");

  auto samples = ds.samples_for("train", hyper.sample_stride);
  require(!samples.empty(), errc::config_error, "no training samples");

  detail::Adam adam;
  adam.init(model.weights);
  Rng shuffle_rng(hyper.seed ^ 0x747261696e527567ULL);
  Rng dropout_rng(hyper.seed ^ 0x64726f70ULL);
  DropoutCtx drop;
  drop.rate = model.config.dropout_rate;
  drop.rng = &dropout_rng;

  FitResult res;
  const imbalance::WeightTable* wt = hyper.reweight ? &ds.weights : nullptr;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    shuffle_rng.shuffle(samples);
    double lr = hyper.lr_at(epoch);
    double obj_sum = 0.0, lh_sum = 0.0, lw_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < samples.size(); start += hyper.batch_size) {
      std::size_t len = std::min(hyper.batch_size, samples.size() - start);
      BatchArrays batch = materialize_batch(
          ds, std::span<const datapipe::SampleRef>(samples.data() + start, len), model.norms,
          wt);
      Graph g;
      g.set_free_buffers_in_backward(true);
      WeightVars wv = bind_weights(g, model.weights, true);
      LossVars loss = batch_loss(g, batch, wv, model.config, model.norms, hyper.lambda_h,
                                 hyper.lambda_w, false, drop);
      double obj = loss.objective.val().item();
      require(std::isfinite(obj), errc::non_finite_loss,
              "objective not finite at epoch " + std::to_string(epoch) + " batch " +
                  std::to_string(n_batches));
      obj_sum += obj;
      lh_sum += loss.l_h.val().item();
      lw_sum += loss.l_w.val().item();
      g.backward(loss.objective);
      std::vector<const Array*> grads;
      grads.reserve(wv.vars.size());
      for (Var v : wv.vars) grads.push_back(&v.grad());
      adam.step(model.weights, grads, lr);
      ++n_batches;
    }
    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.objective = obj_sum / static_cast<double>(n_batches);
    log.l_h = lh_sum / static_cast<double>(n_batches);
    log.l_w = lw_sum / static_cast<double>(n_batches);
    res.log.push_back(log);
    if (progress)
      (*progress) << "epoch " << epoch << " lr " << lr << " objective " << log.objective
                  << std::endl;
  }
  res.model = std::move(model);
  return res;
}

// Batched inference; returns raw-scale predictions for the given samples.
inline std::vector<double> predict(const TrainedModel& model, const datapipe::Dataset& ds,
                                   std::span<const datapipe::SampleRef> refs,
                                   std::size_t chunk = 256) {
  std::vector<double> out;
  out.reserve(refs.size());
  for (std::size_t start = 0; start < refs.size(); start += chunk) {
    std::size_t len = std::min(chunk, refs.size() - start);
    BatchArrays batch = materialize_batch(
        ds, std::span<const datapipe::SampleRef>(refs.data() + start, len), model.norms,
        nullptr);
    Graph g;
    WeightVars wv = bind_weights(g, model.weights, false);
    Var ppf = g.constant(batch.ppf);
    Var rftn = g.constant(batch.rftn);
    Var pbis = g.constant(batch.pbis);
    Var statics = g.constant(batch.statics);
    ForwardOut fo = model_forward(g, ppf, rftn, pbis, statics, wv, model.config);
    const Array& pred = fo.pred_norm.val();
    for (std::size_t i = 0; i < pred.size(); ++i)
      out.push_back(datapipe::denormalize(pred[i], model.norms.bis_mean, model.norms.bis_scale));
  }
  return out;
}

// Single-sample streaming inference with per-step wall-clock timing.
struct StreamResult {
  std::vector<double> predictions;
  std::vector<double> latencies_s;
  double median_latency_s = 0.0;
};

inline StreamResult predict_stream(const TrainedModel& model, const datapipe::Dataset& ds,
                                   std::span<const datapipe::SampleRef> refs) {
  StreamResult sr;
  sr.predictions.reserve(refs.size());
  sr.latencies_s.reserve(refs.size());
  for (const auto& ref : refs) {
    auto t0 = std::chrono::steady_clock::now();
    datapipe::SampleRef one[1] = {ref};
    auto p = predict(model, ds, std::span<const datapipe::SampleRef>(one, 1), 1);
    auto t1 = std::chrono::steady_clock::now();
    sr.predictions.push_back(p[0]);
    sr.latencies_s.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  if (!sr.latencies_s.empty()) {
    auto sorted = sr.latencies_s;
    std::sort(sorted.begin(), sorted.end());
    sr.median_latency_s = sorted[sorted.size() / 2];
  }
  return sr;
}

}  // namespace doa::nn
