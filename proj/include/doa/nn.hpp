#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "doa/autodiff.hpp"
#include "doa/common.hpp"
#include "doa/datapipe.hpp"

// The prediction network: three drug/pseudo-history LSTM encoders with a
// correction bottleneck, a gated residual fusion block injecting the static
// covariates at every step, and an interpretable multi-head attention decoder
// whose last step feeds the output bottleneck through LSTM skip connections.
namespace doa::nn {

using ad::Array;
using ad::Graph;
using ad::Var;

struct ModelConfig {
  std::size_t lstm_hidden = 64;
  std::size_t grn_hidden = 64;
  std::size_t num_heads = 4;
  std::array<std::size_t, 3> bottleneck = {64, 32, 1};
  std::size_t seq_len = 180;
  std::size_t static_dim = 4;
  double dropout_rate = 0.0;

  void validate() const {
    require(lstm_hidden > 0 && grn_hidden > 0 && num_heads > 0 && seq_len > 0,
            errc::config_error, "model dimensions must be positive");
    require(grn_hidden % num_heads == 0, errc::config_error,
            "grn_hidden must be divisible by num_heads");
    require(bottleneck[0] > 0 && bottleneck[1] > 0 && bottleneck[2] == 1, errc::config_error,
            "bottleneck must end in width 1");
    require(static_dim == 4, errc::config_error, "static covariates are age/sex/weight/height");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, errc::config_error,
            "dropout_rate outside [0, 1)");
  }
};

// Named parameter store with stable ordering (serialization and the optimizer
// both rely on it).
struct ModelWeights {
  std::vector<std::pair<std::string, Array>> params;

  void push(std::string name, Array a) { params.emplace_back(std::move(name), std::move(a)); }

  int index_of(std::string_view name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].first == name) return static_cast<int>(i);
    return -1;
  }

  const Array& at(std::string_view name) const {
    int i = index_of(name);
    require(i >= 0, errc::config_error, "unknown parameter " + std::string(name));
    return params[static_cast<std::size_t>(i)].second;
  }

  Array& at(std::string_view name) {
    int i = index_of(name);
    require(i >= 0, errc::config_error, "unknown parameter " + std::string(name));
    return params[static_cast<std::size_t>(i)].second;
  }
};

namespace detail {

inline Array uniform_init(ad::Shape shape, std::size_t fan_in, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Array a = Array::uninit(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(-bound, bound);
  return a;
}

inline Array lstm_bias_init(std::size_t hidden) {
  // forget-gate bias 1, everything else 0; gate order is (i, f, g, o)
  Array b = Array::zeros({4 * hidden});
  for (std::size_t j = 0; j < hidden; ++j) b[hidden + j] = 1.0;
  return b;
}

}  // namespace detail

inline const char* kEncoderStreams[3] = {"ppf", "rftn", "pbis"};

inline ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed ^ 0x6e6e774d6f64656cULL);
  ModelWeights w;
  const std::size_t H = cfg.lstm_hidden;
  const std::size_t D = cfg.grn_hidden;
  const std::size_t enc_dim = 3 * H;

  for (const char* s : kEncoderStreams) {
    std::string p = std::string("lstm.") + s;
    w.push(p + ".wx", detail::uniform_init({1, 4 * H}, 1, rng));
    w.push(p + ".wh", detail::uniform_init({H, 4 * H}, H, rng));
    w.push(p + ".b", detail::lstm_bias_init(H));
  }

  auto push_affine = [&](const std::string& name, std::size_t in, std::size_t out) {
    w.push(name + ".w", detail::uniform_init({in, out}, in, rng));
    w.push(name + ".b", Array::zeros({out}));
  };

  // history-correction bottleneck over the concatenated encoder states
  push_affine("enc_bn.0", enc_dim, cfg.bottleneck[0]);
  push_affine("enc_bn.1", cfg.bottleneck[0], cfg.bottleneck[1]);
  push_affine("enc_bn.2", cfg.bottleneck[1], cfg.bottleneck[2]);

  // width-matching projection into the fusion block
  push_affine("fuse", enc_dim, D);

  push_affine("grn.a", D, D);
  w.push("grn.c.w", detail::uniform_init({cfg.static_dim, D}, cfg.static_dim, rng));
  push_affine("grn.glu", D, 2 * D);
  w.push("grn.ln.scale", Array::full({D}, 1.0));
  w.push("grn.ln.shift", Array::zeros({D}));

  const std::size_t dk = D / cfg.num_heads;
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    std::string p = "attn.h" + std::to_string(h);
    w.push(p + ".wq", detail::uniform_init({D, dk}, D, rng));
    w.push(p + ".wk", detail::uniform_init({D, dk}, D, rng));
  }
  w.push("attn.wv", detail::uniform_init({D, D}, D, rng));
  w.push("attn.wh", detail::uniform_init({D, D}, D, rng));

  // output bottleneck over [beta, h1, h2, h3]
  push_affine("dec_bn.0", D + enc_dim, cfg.bottleneck[0]);
  push_affine("dec_bn.1", cfg.bottleneck[0], cfg.bottleneck[1]);
  push_affine("dec_bn.2", cfg.bottleneck[1], cfg.bottleneck[2]);
  return w;
}

// Per-graph handles over the parameter set.
struct WeightVars {
  const ModelWeights* proto = nullptr;
  std::vector<Var> vars;

  Var at(std::string_view name) const {
    int i = proto->index_of(name);
    require(i >= 0, errc::config_error, "unknown parameter " + std::string(name));
    return vars[static_cast<std::size_t>(i)];
  }
};

inline WeightVars bind_weights(Graph& g, const ModelWeights& w, bool trainable) {
  WeightVars wv;
  wv.proto = &w;
  wv.vars.reserve(w.params.size());
  for (const auto& [name, arr] : w.params) wv.vars.push_back(g.leaf(arr, trainable));
  return wv;
}

// Rebind existing graph Vars (one per parameter, in proto order).
inline WeightVars bind_vars(const ModelWeights& proto, std::vector<Var> vars) {
  require(vars.size() == proto.params.size(), errc::shape_mismatch,
          "var count does not match parameter count");
  return WeightVars{&proto, std::move(vars)};
}

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

inline Var affine(Graph& g, Var x, Var w, Var b) { return g.add(g.matmul(x, w), b); }

// Gated linear unit on a pre-split pair.
inline Var glu(Graph& g, Var value_half, Var gate_half) {
  return g.mul(value_half, g.sigmoid(gate_half));
}

// Runs one LSTM over x [B,T] (single input feature per step). Returns the
// per-step hidden states [B,T,H] and the final (h, c).
struct LstmOut {
  Var states;  // [B,T,H]
  Var h_last;  // [B,H]
  Var c_last;  // [B,H]
};

inline LstmOut lstm_sequence(Graph& g, Var x_bt, Var wx, Var wh, Var b, std::size_t hidden) {
  const auto& shape = x_bt.shape();
  require(shape.size() == 2, errc::shape_mismatch, "lstm_sequence expects [B,T]");
  std::size_t B = shape[0], T = shape[1];
  Var h = g.constant(Array::zeros({B, hidden}));
  Var c = g.constant(Array::zeros({B, hidden}));
  std::vector<Var> steps;
  steps.reserve(T);
  for (std::size_t t = 0; t < T; ++t) {
    Var xt = g.slice(x_bt, 1, t, 1);  // [B,1]
    Var hc = g.lstm_step(xt, h, c, wx, wh, b);
    h = g.slice(hc, 1, 0, hidden);
    c = g.slice(hc, 1, hidden, hidden);
    steps.push_back(g.reshape(h, {B, 1, hidden}));
  }
  return {g.concat(steps, 1), h, c};
}

struct EncoderOut {
  Var zenc;        // [B,T,3H] concatenated per-step states
  Var y_hat_norm;  // [B,T] corrected history, normalized scale
  Var h1, h2, h3;  // final hidden state per encoder
};

// Part A: three independent encoders over propofol rate, remifentanil rate,
// and the PK-PD pseudo-history, plus the correction bottleneck.
inline EncoderOut encoder_forward(Graph& g, Var ppf, Var rftn, Var pbis, const WeightVars& w,
                                  const ModelConfig& cfg) {
  const std::size_t H = cfg.lstm_hidden;
  LstmOut l1 = lstm_sequence(g, ppf, w.at("lstm.ppf.wx"), w.at("lstm.ppf.wh"),
                             w.at("lstm.ppf.b"), H);
  LstmOut l2 = lstm_sequence(g, rftn, w.at("lstm.rftn.wx"), w.at("lstm.rftn.wh"),
                             w.at("lstm.rftn.b"), H);
  LstmOut l3 = lstm_sequence(g, pbis, w.at("lstm.pbis.wx"), w.at("lstm.pbis.wh"),
                             w.at("lstm.pbis.b"), H);
  Var zenc = g.concat({l1.states, l2.states, l3.states}, 2);  // [B,T,3H]

  Var y = affine(g, zenc, w.at("enc_bn.0.w"), w.at("enc_bn.0.b"));
  y = g.elu(y);
  y = affine(g, y, w.at("enc_bn.1.w"), w.at("enc_bn.1.b"));
  y = g.elu(y);
  y = affine(g, y, w.at("enc_bn.2.w"), w.at("enc_bn.2.b"));  // [B,T,1]
  const auto& zs = zenc.shape();
  Var y_hat = g.reshape(y, {zs[0], zs[1]});
  return {zenc, y_hat, l1.h_last, l2.h_last, l3.h_last};
}

// Training-time inverted dropout. Inactive when rate == 0 or no RNG is bound
// (inference).
struct DropoutCtx {
  double rate = 0.0;
  Rng* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }

  Var apply(Graph& g, Var x) const {
    if (!active()) return x;
    Array mask = Array::uninit(x.shape());
    double keep = 1.0 - rate;
    for (std::size_t i = 0; i < mask.size(); ++i)
      mask[i] = rng->uniform01() < keep ? 1.0 / keep : 0.0;
    return g.mul(x, g.constant(std::move(mask)));
  }
};

// Part B: gated residual fusion of the temporal features with the static
// context, applied identically at every time step.
inline Var grn_forward(Graph& g, Var a, Var c, const WeightVars& w,
                       const DropoutCtx& drop = {}) {
  const auto& as = a.shape();
  require(as.size() == 3, errc::shape_mismatch, "grn expects [B,T,d]");
  std::size_t B = as[0], T = as[1], D = as[2];
  Var c_proj = g.matmul(c, w.at("grn.c.w"));                 // [B,d]
  Var c_step = g.broadcast_to(g.reshape(c_proj, {B, 1, D}), {B, T, D});
  Var eta1 = g.add(affine(g, a, w.at("grn.a.w"), w.at("grn.a.b")), c_step);
  Var eta2 = drop.apply(g, g.elu(eta1));
  Var eta3 = affine(g, eta2, w.at("grn.glu.w"), w.at("grn.glu.b"));  // [B,T,2d]
  Var value = g.slice(eta3, 2, 0, D);
  Var gate = g.slice(eta3, 2, D, D);
  Var gated = glu(g, value, gate);
  return g.layer_norm(g.add(a, gated), w.at("grn.ln.scale"), w.at("grn.ln.shift"));
}

namespace detail {

inline Array causal_mask(std::size_t T) {
  Array m = Array::zeros({T, T});
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = i + 1; j < T; ++j) m[i * T + j] = -1e9;
  return m;
}

}  // namespace detail

// One head's causal attention matrix [B,T,T]; every row is a distribution
// over positions <= the row index.
inline Var attention_head_matrix(Graph& g, Var z, const WeightVars& w, const ModelConfig& cfg,
                                 std::size_t head, bool causal = true) {
  const auto& zs = z.shape();
  require(zs.size() == 3, errc::shape_mismatch, "attention expects [B,T,d]");
  std::size_t T = zs[1], D = zs[2];
  require(D == cfg.grn_hidden, errc::shape_mismatch, "attention width mismatch");
  require(head < cfg.num_heads, errc::config_error, "head index out of range");
  const std::size_t dk = D / cfg.num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::string p = "attn.h" + std::to_string(head);
  Var q = g.matmul(z, w.at(p + ".wq"));  // [B,T,dk]
  Var k = g.matmul(z, w.at(p + ".wk"));
  Var scores = g.mul_scalar(g.matmul(q, k, false, true), scale);  // [B,T,T]
  if (causal) scores = g.add(scores, g.constant(detail::causal_mask(T)));
  return g.softmax(scores, 2);
}

// Head-averaged attention matrix; rows stay stochastic under the mean.
inline Var mean_attention_matrix(Graph& g, Var z, const WeightVars& w, const ModelConfig& cfg,
                                 bool causal = true) {
  Var mean_attn;
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    Var attn = attention_head_matrix(g, z, w, cfg, h, causal);
    mean_attn = h == 0 ? attn : g.add(mean_attn, attn);
  }
  return g.mul_scalar(mean_attn, 1.0 / static_cast<double>(cfg.num_heads));
}

// Part C: interpretable multi-head attention. Head-specific query/key maps
// produce per-head attention matrices that are averaged and applied once to
// the shared value projection. Causal masking restricts each position to its
// past.
inline Var interpretable_attention(Graph& g, Var z, const WeightVars& w,
                                   const ModelConfig& cfg, bool causal = true) {
  Var mean_attn = mean_attention_matrix(g, z, w, cfg, causal);
  Var v = g.matmul(z, w.at("attn.wv"));  // [B,T,d]
  Var mixed = g.matmul(mean_attn, v);    // [B,T,d]
  return g.matmul(mixed, w.at("attn.wh"));
}

// Last-query-only attention: identical to the final row of the causal variant
// (the last position attends to the whole sequence) without materializing the
// [T,T] matrices. Returns [B,d].
inline Var attention_last_step(Graph& g, Var z, const WeightVars& w, const ModelConfig& cfg) {
  const auto& zs = z.shape();
  std::size_t B = zs[0], T = zs[1], D = zs[2];
  const std::size_t dk = D / cfg.num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Var z_last = g.slice(z, 1, T - 1, 1);  // [B,1,d]
  Var mean_attn;
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    std::string p = "attn.h" + std::to_string(h);
    Var q = g.matmul(z_last, w.at(p + ".wq"));  // [B,1,dk]
    Var k = g.matmul(z, w.at(p + ".wk"));       // [B,T,dk]
    Var scores = g.mul_scalar(g.matmul(q, k, false, true), scale);  // [B,1,T]
    Var attn = g.softmax(scores, 2);
    mean_attn = h == 0 ? attn : g.add(mean_attn, attn);
  }
  mean_attn = g.mul_scalar(mean_attn, 1.0 / static_cast<double>(cfg.num_heads));
  Var v = g.matmul(z, w.at("attn.wv"));
  Var beta = g.matmul(g.matmul(mean_attn, v), w.at("attn.wh"));  // [B,1,d]
  return g.reshape(beta, {B, D});
}

struct ForwardOut {
  Var pred_norm;   // [B] normalized prediction
  Var y_hat_norm;  // [B,T] normalized corrected history
};

// Full model on normalized inputs. `full_attention` materializes the entire
// causal attention output before taking the last step; the default computes
// the last step directly (identical result, far less memory).
inline ForwardOut model_forward(Graph& g, Var ppf, Var rftn, Var pbis, Var statics,
                                const WeightVars& w, const ModelConfig& cfg,
                                bool full_attention = false, const DropoutCtx& drop = {}) {
  EncoderOut enc = encoder_forward(g, ppf, rftn, pbis, w, cfg);
  Var fused_in = affine(g, enc.zenc, w.at("fuse.w"), w.at("fuse.b"));  // [B,T,d]
  Var fused = grn_forward(g, fused_in, statics, w, drop);
  Var beta;
  if (full_attention) {
    Var b_all = interpretable_attention(g, fused, w, cfg, true);
    const auto& bs = b_all.shape();
    beta = g.reshape(g.slice(b_all, 1, bs[1] - 1, 1), {bs[0], bs[2]});
  } else {
    beta = attention_last_step(g, fused, w, cfg);
  }
  beta = drop.apply(g, beta);
  Var skip = g.concat({beta, enc.h1, enc.h2, enc.h3}, 1);  // [B, d+3H]
  Var y = affine(g, skip, w.at("dec_bn.0.w"), w.at("dec_bn.0.b"));
  y = g.elu(y);
  y = affine(g, y, w.at("dec_bn.1.w"), w.at("dec_bn.1.b"));
  y = g.elu(y);
  y = affine(g, y, w.at("dec_bn.2.w"), w.at("dec_bn.2.b"));  // [B,1]
  Var pred = g.reshape(y, {y.shape()[0]});
  return {pred, enc.y_hat_norm};
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

struct TrainedModel {
  ModelConfig config;
  datapipe::Normalization norms;
  ModelWeights weights;
};

inline constexpr char kModelMagic[8] = {'D', 'O', 'A', 'M', 'O', 'D', 'L', '\0'};

inline void save_model(const TrainedModel& m, std::ostream& os) {
  namespace io = datapipe::io;
  os.write(kModelMagic, 8);
  os.put(1);  // version
  io::put_u32(os, static_cast<std::uint32_t>(m.config.lstm_hidden));
  io::put_u32(os, static_cast<std::uint32_t>(m.config.grn_hidden));
  io::put_u32(os, static_cast<std::uint32_t>(m.config.num_heads));
  for (std::size_t b : m.config.bottleneck) io::put_u32(os, static_cast<std::uint32_t>(b));
  io::put_u32(os, static_cast<std::uint32_t>(m.config.seq_len));
  io::put_u32(os, static_cast<std::uint32_t>(m.config.static_dim));
  io::put_f64(os, m.config.dropout_rate);
  io::put_f64(os, m.norms.ppf_mean);
  io::put_f64(os, m.norms.ppf_scale);
  io::put_f64(os, m.norms.rftn_mean);
  io::put_f64(os, m.norms.rftn_scale);
  io::put_f64(os, m.norms.bis_mean);
  io::put_f64(os, m.norms.bis_scale);
  for (int i = 0; i < 4; ++i) {
    io::put_f64(os, m.norms.static_mean[i]);
    io::put_f64(os, m.norms.static_scale[i]);
  }
  io::put_u32(os, static_cast<std::uint32_t>(m.weights.params.size()));
  for (const auto& [name, arr] : m.weights.params) {
    io::put_string(os, name);
    io::put_u32(os, static_cast<std::uint32_t>(arr.rank()));
    for (std::size_t d : arr.shape()) io::put_u32(os, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < arr.size(); ++i) io::put_f64(os, arr[i]);
  }
}

inline TrainedModel load_model(std::istream& is) {
  namespace io = datapipe::io;
  char magic[8];
  is.read(magic, 8);
  require(is.good() && std::memcmp(magic, kModelMagic, 8) == 0, errc::io_error,
          "not a model file");
  int version = is.get();
  require(version == 1, errc::io_error, "unsupported model version " + std::to_string(version));
  TrainedModel m;
  m.config.lstm_hidden = io::get_u32(is);
  m.config.grn_hidden = io::get_u32(is);
  m.config.num_heads = io::get_u32(is);
  for (std::size_t& b : m.config.bottleneck) b = io::get_u32(is);
  m.config.seq_len = io::get_u32(is);
  m.config.static_dim = io::get_u32(is);
  m.config.dropout_rate = io::get_f64(is);
  m.norms.ppf_mean = io::get_f64(is);
  m.norms.ppf_scale = io::get_f64(is);
  m.norms.rftn_mean = io::get_f64(is);
  m.norms.rftn_scale = io::get_f64(is);
  m.norms.bis_mean = io::get_f64(is);
  m.norms.bis_scale = io::get_f64(is);
  for (int i = 0; i < 4; ++i) {
    m.norms.static_mean[i] = io::get_f64(is);
    m.norms.static_scale[i] = io::get_f64(is);
  }
  std::uint32_t n_params = io::get_u32(is);
  for (std::uint32_t p = 0; p < n_params; ++p) {
    std::string name = io::get_string(is);
    std::uint32_t rank = io::get_u32(is);
    ad::Shape shape(rank);
    for (auto& d : shape) d = io::get_u32(is);
    Array a = Array::uninit(shape);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = io::get_f64(is);
    require(a.all_finite(), errc::non_finite_input, "non-finite parameter " + name);
    m.weights.push(name, std::move(a));
  }
  m.config.validate();
  return m;
}

inline void save_model_file(const TrainedModel& m, const std::filesystem::path& path) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    require(os.good(), errc::io_error, "cannot write " + tmp.string());
    save_model(m, os);
  }
  std::filesystem::rename(tmp, path);
}

inline TrainedModel load_model_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), errc::io_error, "cannot open " + path.string());
  return load_model(is);
}

}  // namespace doa::nn
