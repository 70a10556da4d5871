#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "doa/array.hpp"
#include "doa/common.hpp"

namespace doa::ad {

class Graph;

// Lightweight handle into a Graph's tape.
class Var {
 public:
  Var() : g_(nullptr), id_(0) {}
  const Array& val() const;
  const Array& grad() const;
  const Shape& shape() const;
  Graph* graph() const { return g_; }
  std::size_t id() const { return id_; }
  bool valid() const { return g_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : g_(g), id_(id) {}
  Graph* g_;
  std::size_t id_;
};

namespace detail {

// C = op(A[M,K], B[K,N]) accumulated into C (caller zeroes or pre-seeds C).
// i-k-j ordering keeps the inner loop contiguous for both B and C.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<double> transpose2d(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

}  // namespace detail

// Eagerly evaluated reverse-mode tape over dense arrays. One graph instance is
// single-threaded; arrays are immutable once created so sharing across graphs
// is safe.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t num_nodes() const { return nodes_.size(); }

  Var leaf(Array value, bool requires_grad = false) {
    return make(std::move(value), {}, requires_grad, {});
  }
  Var constant(Array value) { return leaf(std::move(value), false); }
  Var constant_scalar(double v) { return leaf(Array::scalar(v), false); }

  // ---- elementwise binary ops with limited broadcasting -------------------
  // Allowed: identical shapes, scalar operand, or one operand whose shape is a
  // trailing suffix of the other's.

  Var add(Var a, Var b) { return binary(a, b, BinOp::add); }
  Var sub(Var a, Var b) { return binary(a, b, BinOp::sub); }
  Var mul(Var a, Var b) { return binary(a, b, BinOp::mul); }

  Var add_scalar(Var a, double c) {
    check_mine(a);
    Array out = Array::uninit(node(a).value.shape());
    const Array& v = node(a).value;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] + c;
    std::size_t pa = a.id();
    return make(std::move(out), {pa}, false, [pa](Graph& g, std::size_t self) {
      g.accumulate(pa, g.node_at(self).grad);
    });
  }

  Var mul_scalar(Var a, double c) {
    check_mine(a);
    Array out = Array::uninit(node(a).value.shape());
    const Array& v = node(a).value;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * c;
    std::size_t pa = a.id();
    return make(std::move(out), {pa}, false, [pa, c](Graph& g, std::size_t self) {
      const Array& go = g.node_at(self).grad;
      Array d = Array::uninit(go.shape());
      for (std::size_t i = 0; i < go.size(); ++i) d[i] = go[i] * c;
      g.accumulate(pa, d);
    });
  }

  // ---- matmul --------------------------------------------------------------
  // Supports [M,K]x[K,N], batched [..,M,K]x[..,K,N] with equal leading dims,
  // and [..,M,K]x[K,N] (right operand shared across the batch). transpose
  // flags apply to the trailing two dims.
  Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
    check_mine(a);
    check_mine(b);
    const Array& av = node(a).value;
    const Array& bv = node(b).value;
    MatDims d = mat_dims(av.shape(), bv.shape(), ta, tb);
    Array out = Array::uninit(d.out_shape);
    std::fill(out.data(), out.data() + out.size(), 0.0);
    matmul_into(av, bv, out, d, ta, tb);
    std::size_t pa = a.id(), pb = b.id();
    return make(std::move(out), {pa, pb}, false, [pa, pb, d, ta, tb](Graph& g, std::size_t self) {
      const Array& go = g.node_at(self).grad;
      const Array& av2 = g.node_at(pa).value;
      const Array& bv2 = g.node_at(pb).value;
      if (g.node_at(pa).needs_grad) {
        Array da = Array::zeros(av2.shape());
        // dA = dC * B^T (flag algebra folded into helper)
        g.matmul_grad_a(go, bv2, da, d, ta, tb);
        g.accumulate(pa, da);
      }
      if (g.node_at(pb).needs_grad) {
        Array db = Array::zeros(bv2.shape());
        g.matmul_grad_b(go, av2, db, d, ta, tb);
        g.accumulate(pb, db);
      }
    });
  }

  // ---- unary elementwise ----------------------------------------------------

  Var exp(Var a) {
    return unary(a, [](double x) { return std::exp(x); },
                 [](double /*x*/, double y) { return y; });
  }

  Var log(Var a) {
    check_mine(a);
    const Array& v = node(a).value;
    for (std::size_t i = 0; i < v.size(); ++i)
      require(v[i] > 0.0, errc::domain_error, "log of non-positive value");
    return unary(a, [](double x) { return std::log(x); },
                 [](double x, double /*y*/) { return 1.0 / x; });
  }

  Var tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); },
                 [](double /*x*/, double y) { return 1.0 - y * y; });
  }

  Var sigmoid(Var a) {
    return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                 [](double /*x*/, double y) { return y * (1.0 - y); });
  }

  Var relu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x, double /*y*/) { return x > 0.0 ? 1.0 : 0.0; });
  }

  Var elu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
                 [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; });
  }

  // ---- softmax over an axis --------------------------------------------------
  Var softmax(Var a, std::size_t axis) {
    check_mine(a);
    const Array& v = node(a).value;
    require(axis < v.rank(), errc::shape_mismatch, "softmax axis out of range");
    Array out = Array::uninit(v.shape());
    AxisIter it(v.shape(), axis);
    for (std::size_t s = 0; s < it.num_slices; ++s) {
      std::size_t base = it.slice_base(s);
      double mx = -1e300;
      for (std::size_t k = 0; k < it.axis_len; ++k) mx = std::max(mx, v[base + k * it.stride]);
      double denom = 0.0;
      for (std::size_t k = 0; k < it.axis_len; ++k) {
        double e = std::exp(v[base + k * it.stride] - mx);
        out[base + k * it.stride] = e;
        denom += e;
      }
      double inv = 1.0 / denom;
      for (std::size_t k = 0; k < it.axis_len; ++k) out[base + k * it.stride] *= inv;
    }
    std::size_t pa = a.id();
    return make(std::move(out), {pa}, false, [pa, axis](Graph& g, std::size_t self) {
      const Array& y = g.node_at(self).value;
      const Array& go = g.node_at(self).grad;
      Array d = Array::uninit(y.shape());
      AxisIter it2(y.shape(), axis);
      for (std::size_t s = 0; s < it2.num_slices; ++s) {
        std::size_t base = it2.slice_base(s);
        double dot = 0.0;
        for (std::size_t k = 0; k < it2.axis_len; ++k) {
          std::size_t idx = base + k * it2.stride;
          dot += go[idx] * y[idx];
        }
        for (std::size_t k = 0; k < it2.axis_len; ++k) {
          std::size_t idx = base + k * it2.stride;
          d[idx] = y[idx] * (go[idx] - dot);
        }
      }
      g.accumulate(pa, d);
    });
  }

  // ---- reductions -------------------------------------------------------------

  Var sum_all(Var a) {
    check_mine(a);
    const Array& v = node(a).value;
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v[i];
    Array res = Array::uninit({1});
    res[0] = s;
    std::size_t pa = a.id();
    return make(std::move(res), {pa}, false, [pa](Graph& g, std::size_t self) {
      double go = g.node_at(self).grad[0];
      const Array& pv = g.node_at(pa).value;
      Array d = Array::uninit(pv.shape());
      std::fill(d.data(), d.data() + d.size(), go);
      g.accumulate(pa, d);
    });
  }

  Var mean_all(Var a) {
    check_mine(a);
    std::size_t n = node(a).value.size();
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(n));
  }

  // Reduces over `axis`; result drops that axis (scalar result keeps shape [1]).
  Var sum(Var a, std::size_t axis) { return reduce_axis(a, axis, false); }
  Var mean(Var a, std::size_t axis) { return reduce_axis(a, axis, true); }

  // ---- shape ops ----------------------------------------------------------------

  Var reshape(Var a, Shape shape) {
    check_mine(a);
    const Array& v = node(a).value;
    require(shape_size(shape) == v.size(), errc::shape_mismatch,
            "reshape " + shape_str(v.shape()) + " -> " + shape_str(shape));
    Array out = Array::uninit(shape);
    std::copy(v.data(), v.data() + v.size(), out.data());
    std::size_t pa = a.id();
    return make(std::move(out), {pa}, false, [pa](Graph& g, std::size_t self) {
      const Array& go = g.node_at(self).grad;
      const Array& pv = g.node_at(pa).value;
      Array d = Array::uninit(pv.shape());
      std::copy(go.data(), go.data() + go.size(), d.data());
      g.accumulate(pa, d);
    });
  }

  Var slice(Var a, std::size_t axis, std::size_t start, std::size_t len) {
    check_mine(a);
    const Array& v = node(a).value;
    require(axis < v.rank(), errc::shape_mismatch, "slice axis out of range");
    require(len > 0 && start + len <= v.shape()[axis], errc::shape_mismatch,
            "slice range out of bounds");
    Shape oshape = v.shape();
    oshape[axis] = len;
    Array out = Array::uninit(oshape);
    copy_slice(v, out, axis, start, len, /*scatter=*/false);
    std::size_t pa = a.id();
    return make(std::move(out), {pa}, false,
                [pa, axis, start, len](Graph& g, std::size_t self) {
                  if (!g.node_at(pa).needs_grad) return;
                  const Array& go = g.node_at(self).grad;
                  g.ensure_grad(pa);
                  // scatter-add directly into the parent's grad buffer
                  copy_slice_add(g.node_ref(pa).grad, go, axis, start, len);
                });
  }

  Var concat(const std::vector<Var>& parts, std::size_t axis) {
    require(!parts.empty(), errc::shape_mismatch, "concat of zero parts");
    for (Var p : parts) check_mine(p);
    const Shape& s0 = node(parts[0]).value.shape();
    require(axis < s0.size(), errc::shape_mismatch, "concat axis out of range");
    std::size_t total = 0;
    for (Var p : parts) {
      const Shape& s = node(p).value.shape();
      require(s.size() == s0.size(), errc::shape_mismatch, "concat rank mismatch");
      for (std::size_t d = 0; d < s.size(); ++d)
        if (d != axis)
          require(s[d] == s0[d], errc::shape_mismatch, "concat off-axis dims differ");
      total += s[axis];
    }
    Shape oshape = s0;
    oshape[axis] = total;
    Array out = Array::uninit(oshape);
    std::vector<std::size_t> ids;
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (Var p : parts) {
      const Array& pv = node(p).value;
      copy_into_concat(out, pv, axis, off);
      ids.push_back(p.id());
      offsets.push_back(off);
      off += pv.shape()[axis];
    }
    return make(std::move(out), ids, false, [ids, offsets, axis](Graph& g, std::size_t self) {
      const Array& go = g.node_at(self).grad;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!g.node_at(ids[i]).needs_grad) continue;
        const Array& pv = g.node_at(ids[i]).value;
        Array d = Array::uninit(pv.shape());
        g.copy_from_concat(go, d, axis, offsets[i]);
        g.accumulate(ids[i], d);
      }
    });
  }

  // Right-aligned broadcast: every input dim must equal the target dim or be 1;
  // missing leading dims are treated as 1.
  Var broadcast_to(Var a, Shape target) {
    check_mine(a);
    const Array& v = node(a).value;
    const Shape& is = v.shape();
    require(is.size() <= target.size(), errc::shape_mismatch, "broadcast to lower rank");
    std::size_t off = target.size() - is.size();
    for (std::size_t d = 0; d < is.size(); ++d)
      require(is[d] == target[off + d] || is[d] == 1, errc::shape_mismatch,
              "cannot broadcast " + shape_str(is) + " to " + shape_str(target));
    Array out = Array::uninit(target);
    broadcast_fill(v, out);
    std::size_t pa = a.id();
    return make(std::move(out), {pa}, false, [pa](Graph& g, std::size_t self) {
      const Array& go = g.node_at(self).grad;
      const Array& pv = g.node_at(pa).value;
      Array d = Array::zeros(pv.shape());
      g.broadcast_reduce(go, d);
      g.accumulate(pa, d);
    });
  }

  // ---- fused ops ------------------------------------------------------------------

  // LayerNorm over the last axis: y = (x - mu) / sqrt(var + eps) * scale + shift.
  // scale/shift have shape [last_dim].
  Var layer_norm(Var x, Var scale, Var shift, double eps = 1e-5) {
    check_mine(x);
    check_mine(scale);
    check_mine(shift);
    const Array& xv = node(x).value;
    std::size_t dim = xv.shape().back();
    require(node(scale).value.size() == dim && node(shift).value.size() == dim,
            errc::shape_mismatch, "layer_norm scale/shift must match last dim");
    std::size_t rows = xv.size() / dim;
    Array out = Array::uninit(xv.shape());
    Array saved = Array::uninit({rows, 2});  // mean, inv_std per row
    const Array& sc = node(scale).value;
    const Array& sh = node(shift).value;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = xv.data() + r * dim;
      double mu = 0.0;
      for (std::size_t j = 0; j < dim; ++j) mu += row[j];
      mu /= static_cast<double>(dim);
      double var = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        double d = row[j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(dim);
      double inv = 1.0 / std::sqrt(var + eps);
      saved[r * 2] = mu;
      saved[r * 2 + 1] = inv;
      double* orow = out.data() + r * dim;
      for (std::size_t j = 0; j < dim; ++j) orow[j] = (row[j] - mu) * inv * sc[j] + sh[j];
    }
    std::size_t px = x.id(), ps = scale.id(), pb = shift.id();
    Var res = make(std::move(out), {px, ps, pb}, false,
                   [px, ps, pb, dim, rows](Graph& g, std::size_t self) {
                     const Array& go = g.node_at(self).grad;
                     const Array& sv = g.node_at(self).saved;
                     const Array& xv2 = g.node_at(px).value;
                     const Array& sc2 = g.node_at(ps).value;
                     Array dx = Array::zeros(xv2.shape());
                     Array dsc = Array::zeros(sc2.shape());
                     Array dsh = Array::zeros(sc2.shape());
                     double invd = 1.0 / static_cast<double>(dim);
                     for (std::size_t r = 0; r < rows; ++r) {
                       double mu = sv[r * 2], inv = sv[r * 2 + 1];
                       const double* xr = xv2.data() + r * dim;
                       const double* gr = go.data() + r * dim;
                       double* dxr = dx.data() + r * dim;
                       double sum_dy = 0.0, sum_dyx = 0.0;
                       for (std::size_t j = 0; j < dim; ++j) {
                         double xhat = (xr[j] - mu) * inv;
                         double dy = gr[j] * sc2[j];
                         sum_dy += dy;
                         sum_dyx += dy * xhat;
                         dsc[j] += gr[j] * xhat;
                         dsh[j] += gr[j];
                       }
                       for (std::size_t j = 0; j < dim; ++j) {
                         double xhat = (xr[j] - mu) * inv;
                         double dy = gr[j] * sc2[j];
                         dxr[j] = inv * (dy - invd * sum_dy - xhat * invd * sum_dyx);
                       }
                     }
                     g.accumulate(px, dx);
                     if (g.node_at(ps).needs_grad) g.accumulate(ps, dsc);
                     if (g.node_at(pb).needs_grad) g.accumulate(pb, dsh);
                   });
    node_ref(res.id()).saved = std::move(saved);
    return res;
  }

  // Fused LSTM cell step. x:[B,dx], h:[B,H], c:[B,H], wx:[dx,4H], wh:[H,4H],
  // b:[4H]. Gate layout along the 4H axis is (input, forget, candidate,
  // output). Returns [B,2H] = concat(h', c'); slice to recover the pieces.
  Var lstm_step(Var x, Var h, Var c, Var wx, Var wh, Var b) {
    check_mine(x);
    check_mine(h);
    check_mine(c);
    check_mine(wx);
    check_mine(wh);
    check_mine(b);
    const Array& xv = node(x).value;
    const Array& hv = node(h).value;
    const Array& cv = node(c).value;
    const Array& wxv = node(wx).value;
    const Array& whv = node(wh).value;
    const Array& bv = node(b).value;
    require(xv.rank() == 2 && hv.rank() == 2 && cv.rank() == 2, errc::shape_mismatch,
            "lstm_step expects rank-2 x,h,c");
    std::size_t B = xv.shape()[0], dx = xv.shape()[1];
    std::size_t H = hv.shape()[1];
    require(hv.shape()[0] == B && cv.shape()[0] == B && cv.shape()[1] == H, errc::shape_mismatch,
            "lstm_step h/c shape");
    require(wxv.rank() == 2 && wxv.shape()[0] == dx && wxv.shape()[1] == 4 * H,
            errc::shape_mismatch, "lstm_step wx shape");
    require(whv.rank() == 2 && whv.shape()[0] == H && whv.shape()[1] == 4 * H,
            errc::shape_mismatch, "lstm_step wh shape");
    require(bv.size() == 4 * H, errc::shape_mismatch, "lstm_step bias shape");

    Array gates = Array::uninit({B, 4 * H});  // post-activation, saved for backward
    for (std::size_t i = 0; i < B; ++i) {
      double* grow = gates.data() + i * 4 * H;
      for (std::size_t j = 0; j < 4 * H; ++j) grow[j] = bv[j];
    }
    detail::gemm_acc(xv.data(), wxv.data(), gates.data(), B, dx, 4 * H);
    detail::gemm_acc(hv.data(), whv.data(), gates.data(), B, H, 4 * H);

    Array out = Array::uninit({B, 2 * H});
    for (std::size_t i = 0; i < B; ++i) {
      double* grow = gates.data() + i * 4 * H;
      const double* crow = cv.data() + i * H;
      double* orow = out.data() + i * 2 * H;
      for (std::size_t j = 0; j < H; ++j) {
        double ig = 1.0 / (1.0 + std::exp(-grow[j]));
        double fg = 1.0 / (1.0 + std::exp(-grow[H + j]));
        double gg = std::tanh(grow[2 * H + j]);
        double og = 1.0 / (1.0 + std::exp(-grow[3 * H + j]));
        grow[j] = ig;
        grow[H + j] = fg;
        grow[2 * H + j] = gg;
        grow[3 * H + j] = og;
        double cnew = fg * crow[j] + ig * gg;
        orow[H + j] = cnew;
        orow[j] = og * std::tanh(cnew);
      }
    }

    std::size_t px = x.id(), ph = h.id(), pc = c.id(), pwx = wx.id(), pwh = wh.id(), pb = b.id();
    Var res = make(std::move(out), {px, ph, pc, pwx, pwh, pb}, false,
                   [px, ph, pc, pwx, pwh, pb, B, dx, H](Graph& g, std::size_t self) {
                     const Array& go = g.node_at(self).grad;     // [B,2H]
                     const Array& val = g.node_at(self).value;   // h' | c'
                     const Array& acts = g.node_at(self).saved;  // i,f,g,o
                     const Array& xv2 = g.node_at(px).value;
                     const Array& hv2 = g.node_at(ph).value;
                     const Array& cv2 = g.node_at(pc).value;
                     const Array& wxv2 = g.node_at(pwx).value;
                     const Array& whv2 = g.node_at(pwh).value;
                     Array dgates = Array::uninit({B, 4 * H});  // pre-activation grads
                     Array dc = Array::uninit({B, H});
                     for (std::size_t i = 0; i < B; ++i) {
                       const double* arow = acts.data() + i * 4 * H;
                       const double* vrow = val.data() + i * 2 * H;
                       const double* grow = go.data() + i * 2 * H;
                       const double* crow = cv2.data() + i * H;
                       double* dgrow = dgates.data() + i * 4 * H;
                       double* dcrow = dc.data() + i * H;
                       for (std::size_t j = 0; j < H; ++j) {
                         double ig = arow[j], fg = arow[H + j], gg = arow[2 * H + j],
                                og = arow[3 * H + j];
                         double cnew = vrow[H + j];
                         double tc = std::tanh(cnew);
                         double dh = grow[j];
                         double dcn = grow[H + j] + dh * og * (1.0 - tc * tc);
                         dgrow[3 * H + j] = dh * tc * og * (1.0 - og);
                         dgrow[j] = dcn * gg * ig * (1.0 - ig);
                         dgrow[H + j] = dcn * crow[j] * fg * (1.0 - fg);
                         dgrow[2 * H + j] = dcn * ig * (1.0 - gg * gg);
                         dcrow[j] = dcn * fg;
                       }
                     }
                     if (g.node_at(pc).needs_grad) g.accumulate(pc, dc);
                     if (g.node_at(px).needs_grad) {
                       Array dxv = Array::zeros({B, dx});
                       auto wxT = detail::transpose2d(wxv2.data(), dx, 4 * H);
                       detail::gemm_acc(dgates.data(), wxT.data(), dxv.data(), B, 4 * H, dx);
                       g.accumulate(px, dxv);
                     }
                     if (g.node_at(ph).needs_grad) {
                       Array dhv = Array::zeros({B, H});
                       auto whT = detail::transpose2d(whv2.data(), H, 4 * H);
                       detail::gemm_acc(dgates.data(), whT.data(), dhv.data(), B, 4 * H, H);
                       g.accumulate(ph, dhv);
                     }
                     if (g.node_at(pwx).needs_grad) {
                       Array dwx = Array::zeros({dx, 4 * H});
                       auto xT = detail::transpose2d(xv2.data(), B, dx);
                       detail::gemm_acc(xT.data(), dgates.data(), dwx.data(), dx, B, 4 * H);
                       g.accumulate(pwx, dwx);
                     }
                     if (g.node_at(pwh).needs_grad) {
                       Array dwh = Array::zeros({H, 4 * H});
                       auto hT = detail::transpose2d(hv2.data(), B, H);
                       detail::gemm_acc(hT.data(), dgates.data(), dwh.data(), H, B, 4 * H);
                       g.accumulate(pwh, dwh);
                     }
                     if (g.node_at(pb).needs_grad) {
                       Array db = Array::zeros(g.node_at(pb).value.shape());
                       for (std::size_t i = 0; i < B; ++i)
                         for (std::size_t j = 0; j < 4 * H; ++j) db[j] += dgates[i * 4 * H + j];
                       g.accumulate(pb, db);
                     }
                   });
    node_ref(res.id()).saved = std::move(gates);
    return res;
  }

  // ---- backward -----------------------------------------------------------------

  // Reverse accumulation from a scalar output. Grads reset on every call;
  // leaves that do not reach `output` end up with zero gradients.
  void backward(Var output) {
    check_mine(output);
    require(node(output).value.size() == 1, errc::non_scalar_output,
            "backward requires a scalar output, got " + shape_str(node(output).value.shape()));
    for (Node& n : nodes_) {
      n.grad_live = false;
      n.grad = Array();
    }
    ensure_grad(output.id());
    node_ref(output.id()).grad[0] = 1.0;
    for (std::size_t i = output.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad_live || !n.backward) continue;
      if (!n.needs_grad) continue;
      n.backward(*this, i);
      if (free_buffers_in_backward_ && i != output.id()) {
        // interior grad/saved buffers are dead once this backward ran
        n.grad = Array();
        n.grad_live = false;
        n.saved = Array();
      }
    }
  }

  // Opt-in: release interior value/grad buffers during backward to cap peak
  // memory on training-size graphs. Leaf values and grads are always kept.
  void set_free_buffers_in_backward(bool on) { free_buffers_in_backward_ = on; }

  const Array& value_of(std::size_t id) const { return nodes_[id].value; }

  const Array& grad_of(std::size_t id) {
    ensure_grad(id);
    return nodes_[id].grad;
  }

 private:
  friend class Var;

  enum class BinOp { add, sub, mul };

  struct Node {
    Array value;
    Array grad;
    Array saved;
    std::vector<std::size_t> parents;
    std::function<void(Graph&, std::size_t)> backward;
    bool grad_live = false;
    bool needs_grad = false;
  };

  struct MatDims {
    std::size_t batch, m, k, n;
    std::size_t a_batch_stride, b_batch_stride;
    Shape out_shape;
  };

  // Iterates slices along `axis`: element index = slice_base(s) + k*stride.
  struct AxisIter {
    std::size_t axis_len, stride, num_slices, outer, inner;
    AxisIter(const Shape& s, std::size_t axis) {
      axis_len = s[axis];
      inner = 1;
      for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
      outer = 1;
      for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
      stride = inner;
      num_slices = outer * inner;
    }
    std::size_t slice_base(std::size_t s) const {
      std::size_t o = s / inner, i = s % inner;
      return o * axis_len * inner + i;
    }
  };

  Node& node(Var v) { return nodes_[v.id_]; }
  const Node& node(Var v) const { return nodes_[v.id_]; }
  Node& node_ref(std::size_t id) { return nodes_[id]; }
  const Node& node_at(std::size_t id) const { return nodes_[id]; }

  void check_mine(Var v) const {
    require(v.g_ == this, errc::shape_mismatch, "Var belongs to a different graph");
  }

  Var make(Array value, std::vector<std::size_t> parents, bool requires_grad,
           std::function<void(Graph&, std::size_t)> backward) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    n.needs_grad = requires_grad;
    for (std::size_t p : n.parents)
      if (nodes_[p].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void ensure_grad(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.grad_live) {
      n.grad = Array::zeros(n.value.shape());
      n.grad_live = true;
    }
  }

  void accumulate(std::size_t id, const Array& delta) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    ensure_grad(id);
    require(n.grad.same_shape(delta), errc::shape_mismatch, "gradient shape mismatch");
    double* g = n.grad.data();
    const double* d = delta.data();
    for (std::size_t i = 0; i < delta.size(); ++i) g[i] += d[i];
  }

  template <typename F, typename DF>
  Var unary(Var a, F f, DF df) {
    check_mine(a);
    const Array& v = node(a).value;
    Array out = Array::uninit(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = f(v[i]);
    std::size_t pa = a.id();
    return make(std::move(out), {pa}, false, [pa, df](Graph& g, std::size_t self) {
      const Array& go = g.node_at(self).grad;
      const Array& y = g.node_at(self).value;
      const Array& x = g.node_at(pa).value;
      Array d = Array::uninit(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) d[i] = go[i] * df(x[i], y[i]);
      g.accumulate(pa, d);
    });
  }

  // Broadcast-aware elementwise binary op. `small` must be a scalar or a
  // trailing suffix of `big`'s shape.
  static bool suffix_compatible(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    std::size_t off = big.size() - small.size();
    for (std::size_t d = 0; d < small.size(); ++d)
      if (small[d] != big[off + d]) return false;
    return true;
  }

  Var binary(Var a, Var b, BinOp op) {
    check_mine(a);
    check_mine(b);
    const Array& av = node(a).value;
    const Array& bv = node(b).value;
    bool a_big = true;
    if (av.same_shape(bv)) {
      a_big = true;
    } else if (bv.size() == 1 || suffix_compatible(av.shape(), bv.shape())) {
      a_big = true;
    } else if (av.size() == 1 || suffix_compatible(bv.shape(), av.shape())) {
      a_big = false;
    } else {
      fail(errc::shape_mismatch,
           "incompatible shapes " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    const Array& big = a_big ? av : bv;
    const Array& small = a_big ? bv : av;
    std::size_t rep = big.size() / small.size();
    std::size_t slen = small.size();
    Array out = Array::uninit(big.shape());
    const double* bd = big.data();
    const double* sd = small.data();
    double* od = out.data();
    for (std::size_t r = 0; r < rep; ++r) {
      std::size_t base = r * slen;
      for (std::size_t i = 0; i < slen; ++i) {
        double lhs = a_big ? bd[base + i] : sd[i];
        double rhs = a_big ? sd[i] : bd[base + i];
        double res = 0.0;
        switch (op) {
          case BinOp::add: res = lhs + rhs; break;
          case BinOp::sub: res = lhs - rhs; break;
          case BinOp::mul: res = lhs * rhs; break;
        }
        od[base + i] = res;
      }
    }
    std::size_t pa = a.id(), pb = b.id();
    return make(std::move(out), {pa, pb}, false,
                [pa, pb, op, a_big, rep, slen](Graph& g, std::size_t self) {
                  const Array& go = g.node_at(self).grad;
                  const Array& av2 = g.node_at(pa).value;
                  const Array& bv2 = g.node_at(pb).value;
                  std::size_t big_id = a_big ? pa : pb;
                  std::size_t small_id = a_big ? pb : pa;
                  const Array& small_v = a_big ? bv2 : av2;
                  const Array& big_v = a_big ? av2 : bv2;
                  // d(big)
                  if (g.node_at(big_id).needs_grad) {
                    Array d = Array::uninit(big_v.shape());
                    for (std::size_t r = 0; r < rep; ++r) {
                      std::size_t base = r * slen;
                      for (std::size_t i = 0; i < slen; ++i) {
                        double gv = go[base + i];
                        switch (op) {
                          case BinOp::add: d[base + i] = gv; break;
                          case BinOp::sub:
                            d[base + i] = (big_id == pa) ? gv : -gv;
                            break;
                          case BinOp::mul: d[base + i] = gv * small_v[i]; break;
                        }
                      }
                    }
                    g.accumulate(big_id, d);
                  }
                  // d(small): reduce over the repeated leading dims
                  if (g.node_at(small_id).needs_grad) {
                    Array d = Array::zeros(small_v.shape());
                    for (std::size_t r = 0; r < rep; ++r) {
                      std::size_t base = r * slen;
                      for (std::size_t i = 0; i < slen; ++i) {
                        double gv = go[base + i];
                        switch (op) {
                          case BinOp::add: d[i] += gv; break;
                          case BinOp::sub:
                            d[i] += (small_id == pa) ? gv : -gv;
                            break;
                          case BinOp::mul: d[i] += gv * big_v[base + i]; break;
                        }
                      }
                    }
                    g.accumulate(small_id, d);
                  }
                });
  }

  Var reduce_axis(Var a, std::size_t axis, bool take_mean) {
    check_mine(a);
    const Array& v = node(a).value;
    require(axis < v.rank(), errc::shape_mismatch, "reduce axis out of range");
    AxisIter it(v.shape(), axis);
    Shape oshape;
    for (std::size_t d = 0; d < v.rank(); ++d)
      if (d != axis) oshape.push_back(v.shape()[d]);
    if (oshape.empty()) oshape.push_back(1);
    Array out = Array::uninit(oshape);
    double scale = take_mean ? 1.0 / static_cast<double>(it.axis_len) : 1.0;
    for (std::size_t s = 0; s < it.num_slices; ++s) {
      std::size_t base = it.slice_base(s);
      double acc = 0.0;
      for (std::size_t k = 0; k < it.axis_len; ++k) acc += v[base + k * it.stride];
      out[s] = acc * scale;
    }
    std::size_t pa = a.id();
    return make(std::move(out), {pa}, false, [pa, axis, scale](Graph& g, std::size_t self) {
      const Array& go = g.node_at(self).grad;
      const Array& pv = g.node_at(pa).value;
      Array d = Array::uninit(pv.shape());
      AxisIter it2(pv.shape(), axis);
      for (std::size_t s = 0; s < it2.num_slices; ++s) {
        std::size_t base = it2.slice_base(s);
        double gv = go[s] * scale;
        for (std::size_t k = 0; k < it2.axis_len; ++k) d[base + k * it2.stride] = gv;
      }
      g.accumulate(pa, d);
    });
  }

  // ---- matmul helpers ----

  static MatDims mat_dims(const Shape& as, const Shape& bs, bool ta, bool tb) {
    require(as.size() >= 2 && bs.size() >= 2, errc::shape_mismatch, "matmul needs rank >= 2");
    std::size_t am = as[as.size() - 2], ak = as[as.size() - 1];
    if (ta) std::swap(am, ak);
    std::size_t bk = bs[bs.size() - 2], bn = bs[bs.size() - 1];
    if (tb) std::swap(bk, bn);
    require(ak == bk, errc::shape_mismatch,
            "matmul inner dims " + shape_str(as) + " x " + shape_str(bs));
    std::size_t a_batch = 1;
    for (std::size_t d = 0; d + 2 < as.size(); ++d) a_batch *= as[d];
    std::size_t b_batch = 1;
    for (std::size_t d = 0; d + 2 < bs.size(); ++d) b_batch *= bs[d];
    require(a_batch == b_batch || b_batch == 1 || a_batch == 1, errc::shape_mismatch,
            "matmul batch dims incompatible");
    std::size_t batch = std::max(a_batch, b_batch);
    MatDims d;
    d.batch = batch;
    d.m = am;
    d.k = ak;
    d.n = bn;
    d.a_batch_stride = a_batch == 1 ? 0 : as[as.size() - 2] * as[as.size() - 1];
    d.b_batch_stride = b_batch == 1 ? 0 : bs[bs.size() - 2] * bs[bs.size() - 1];
    // output shape: leading dims of the batched operand, then [m, n]
    const Shape& lead = a_batch >= b_batch ? as : bs;
    Shape out(lead.begin(), lead.end() - 2);
    out.push_back(am);
    out.push_back(bn);
    d.out_shape = std::move(out);
    return d;
  }

  // C += op_a(A) * op_b(B) per batch slice. C must be pre-zeroed/pre-seeded.
  static void matmul_into(const Array& a, const Array& b, Array& c, const MatDims& d, bool ta,
                          bool tb) {
    std::size_t c_stride = d.m * d.n;
    std::size_t a_rows = ta ? d.k : d.m, a_cols = ta ? d.m : d.k;
    std::size_t b_rows = tb ? d.n : d.k, b_cols = tb ? d.k : d.n;
    for (std::size_t s = 0; s < d.batch; ++s) {
      const double* ap = a.data() + s * d.a_batch_stride;
      const double* bp = b.data() + s * d.b_batch_stride;
      double* cp = c.data() + s * c_stride;
      std::vector<double> atmp, btmp;
      if (ta) {
        atmp = detail::transpose2d(ap, a_rows, a_cols);
        ap = atmp.data();
      }
      if (tb) {
        btmp = detail::transpose2d(bp, b_rows, b_cols);
        bp = btmp.data();
      }
      detail::gemm_acc(ap, bp, cp, d.m, d.k, d.n);
    }
  }

  // dA for C = op_a(A) op_b(B): plain case dA = dC B^T; transpose cases follow
  // from swapping/transposing the identity.
  void matmul_grad_a(const Array& go, const Array& bval, Array& da, const MatDims& d, bool ta,
                     bool tb) {
    std::size_t c_stride = d.m * d.n;
    std::size_t da_stride = d.a_batch_stride;
    std::size_t b_stride = d.b_batch_stride;
    for (std::size_t s = 0; s < d.batch; ++s) {
      const double* gp = go.data() + s * c_stride;
      const double* bp = bval.data() + s * b_stride;
      double* dap = da.data() + s * da_stride;
      std::size_t b_rows = tb ? d.n : d.k, b_cols = tb ? d.k : d.n;
      if (!ta) {
        // dA[m,k] = dC[m,n] * B'[n,k]  where B' = (tb ? B : B^T)
        std::vector<double> bt;
        const double* bmat;
        if (tb) {
          bmat = bp;  // B is [n,k] already
        } else {
          bt = detail::transpose2d(bp, b_rows, b_cols);
          bmat = bt.data();
        }
        detail::gemm_acc(gp, bmat, dap, d.m, d.n, d.k);
      } else {
        // A stored as [k,m]; dA_stored[k,m] = B''[k,n] * dC^T[n,m]
        std::vector<double> bmat_v;
        const double* bmat;
        if (tb) {
          bmat_v = detail::transpose2d(bp, b_rows, b_cols);  // [k,n]
          bmat = bmat_v.data();
        } else {
          bmat = bp;  // [k,n]
        }
        auto gt = detail::transpose2d(gp, d.m, d.n);  // [n,m]
        detail::gemm_acc(bmat, gt.data(), dap, d.k, d.n, d.m);
      }
    }
  }

  void matmul_grad_b(const Array& go, const Array& aval, Array& db, const MatDims& d, bool ta,
                     bool tb) {
    std::size_t c_stride = d.m * d.n;
    std::size_t a_stride = d.a_batch_stride;
    std::size_t db_stride = d.b_batch_stride;
    for (std::size_t s = 0; s < d.batch; ++s) {
      const double* gp = go.data() + s * c_stride;
      const double* ap = aval.data() + s * a_stride;
      double* dbp = db.data() + s * db_stride;
      std::size_t a_rows = ta ? d.k : d.m, a_cols = ta ? d.m : d.k;
      if (!tb) {
        // dB[k,n] = A'[k,m] * dC[m,n] where A' = (ta ? A : A^T)
        std::vector<double> at;
        const double* amat;
        if (ta) {
          amat = ap;  // [k,m]
        } else {
          at = detail::transpose2d(ap, a_rows, a_cols);
          amat = at.data();
        }
        detail::gemm_acc(amat, gp, dbp, d.k, d.m, d.n);
      } else {
        // B stored as [n,k]; dB_stored[n,k] = dC^T[n,m] * A''[m,k]
        std::vector<double> amat_v;
        const double* amat;
        if (ta) {
          amat_v = detail::transpose2d(ap, a_rows, a_cols);  // [m,k]
          amat = amat_v.data();
        } else {
          amat = ap;  // [m,k]
        }
        auto gt = detail::transpose2d(gp, d.m, d.n);  // [n,m]
        detail::gemm_acc(gt.data(), amat, dbp, d.n, d.m, d.k);
      }
    }
  }

  // ---- slice / concat / broadcast helpers ----

  static void copy_slice(const Array& src, Array& dst, std::size_t axis, std::size_t start,
                         std::size_t len, bool scatter) {
    (void)scatter;
    AxisIter it(src.shape(), axis);
    std::size_t inner = it.inner;
    for (std::size_t o = 0; o < it.outer; ++o) {
      const double* sp = src.data() + (o * it.axis_len + start) * inner;
      double* dp = dst.data() + o * len * inner;
      std::copy(sp, sp + len * inner, dp);
    }
  }

  static void copy_slice_add(Array& dst_full, const Array& grad_slice, std::size_t axis,
                             std::size_t start, std::size_t len) {
    AxisIter it(dst_full.shape(), axis);
    std::size_t inner = it.inner;
    for (std::size_t o = 0; o < it.outer; ++o) {
      double* dp = dst_full.data() + (o * it.axis_len + start) * inner;
      const double* sp = grad_slice.data() + o * len * inner;
      for (std::size_t i = 0; i < len * inner; ++i) dp[i] += sp[i];
    }
  }

  static void copy_into_concat(Array& out, const Array& part, std::size_t axis, std::size_t off) {
    AxisIter oit(out.shape(), axis);
    std::size_t plen = part.shape()[axis];
    std::size_t inner = oit.inner;
    for (std::size_t o = 0; o < oit.outer; ++o) {
      double* dp = out.data() + (o * oit.axis_len + off) * inner;
      const double* sp = part.data() + o * plen * inner;
      std::copy(sp, sp + plen * inner, dp);
    }
  }

  static void copy_from_concat(const Array& go, Array& d, std::size_t axis, std::size_t off) {
    AxisIter oit(go.shape(), axis);
    std::size_t plen = d.shape()[axis];
    std::size_t inner = oit.inner;
    for (std::size_t o = 0; o < oit.outer; ++o) {
      const double* sp = go.data() + (o * oit.axis_len + off) * inner;
      double* dp = d.data() + o * plen * inner;
      std::copy(sp, sp + plen * inner, dp);
    }
  }

  static void broadcast_fill(const Array& src, Array& dst) {
    const Shape& is = src.shape();
    const Shape& os = dst.shape();
    std::size_t off = os.size() - is.size();
    // strides of src mapped into dst coordinates (0 where broadcast)
    std::vector<std::size_t> sstride(os.size(), 0);
    std::size_t acc = 1;
    for (std::size_t d = is.size(); d-- > 0;) {
      sstride[off + d] = (is[d] == 1) ? 0 : acc;
      acc *= is[d];
    }
    std::vector<std::size_t> idx(os.size(), 0);
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::size_t si = 0;
      for (std::size_t d = 0; d < os.size(); ++d) si += idx[d] * sstride[d];
      dst[i] = src[si];
      for (std::size_t d = os.size(); d-- > 0;) {
        if (++idx[d] < os[d]) break;
        idx[d] = 0;
      }
    }
  }

  static void broadcast_reduce(const Array& go, Array& d) {
    const Shape& is = d.shape();
    const Shape& os = go.shape();
    std::size_t off = os.size() - is.size();
    std::vector<std::size_t> sstride(os.size(), 0);
    std::size_t acc = 1;
    for (std::size_t dd = is.size(); dd-- > 0;) {
      sstride[off + dd] = (is[dd] == 1) ? 0 : acc;
      acc *= is[dd];
    }
    std::vector<std::size_t> idx(os.size(), 0);
    for (std::size_t i = 0; i < go.size(); ++i) {
      std::size_t si = 0;
      for (std::size_t dd = 0; dd < os.size(); ++dd) si += idx[dd] * sstride[dd];
      d[si] += go[i];
      for (std::size_t dd = os.size(); dd-- > 0;) {
        if (++idx[dd] < os[dd]) break;
        idx[dd] = 0;
      }
    }
  }

  std::vector<Node> nodes_;
  bool free_buffers_in_backward_ = false;
};

inline const Array& Var::val() const { return g_->value_of(id_); }
inline const Array& Var::grad() const { return g_->grad_of(id_); }
inline const Shape& Var::shape() const { return g_->value_of(id_).shape(); }

// ---- operator sugar ----
inline Var operator+(Var a, Var b) { return a.graph()->add(a, b); }
inline Var operator-(Var a, Var b) { return a.graph()->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.graph()->mul(a, b); }

// Max relative error between reverse-mode and central finite-difference
// gradients of a scalar-valued function, over every input coordinate.
inline double grad_check(
    const std::function<Var(Graph&, const std::vector<Var>&)>& f,
    const std::vector<Array>& inputs, double eps) {
  require(eps > 0.0 && eps <= 1e-2, errc::domain_error, "grad_check eps must be in (0, 1e-2]");
  Graph g;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Array& a : inputs) vars.push_back(g.leaf(a, true));
  Var out = f(g, vars);
  g.backward(out);
  std::vector<Array> analytic;
  analytic.reserve(vars.size());
  for (Var v : vars) analytic.push_back(v.grad());

  auto eval = [&](const std::vector<Array>& xs) {
    Graph g2;
    std::vector<Var> vs;
    vs.reserve(xs.size());
    for (const Array& a : xs) vs.push_back(g2.leaf(a, false));
    return f(g2, vs).val().item();
  };

  double max_rel = 0.0;
  std::vector<Array> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      double orig = work[i][j];
      work[i][j] = orig + eps;
      double fp = eval(work);
      work[i][j] = orig - eps;
      double fm = eval(work);
      work[i][j] = orig;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[i][j];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace doa::ad
