#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "doa/autodiff.hpp"
#include "doa/common.hpp"

using doa::Error;
using doa::Rng;
using doa::errc;
using doa::ad::Array;
using doa::ad::Graph;
using doa::ad::Var;
using doa::ad::grad_check;

namespace {

Array random_array(doa::ad::Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Array a = Array::uninit(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

}  // namespace

TEST_CASE("array rejects non-finite and mismatched data") {
  CHECK_THROWS_AS(Array({2}, {1.0, std::nan("")}), Error);
  CHECK_THROWS_AS(Array({3}, {1.0, 2.0}), Error);
  CHECK_THROWS_AS(Array::scalar(std::numeric_limits<double>::infinity()), Error);
  Array ok({2, 2}, {1, 2, 3, 4});
  CHECK(ok.size() == 4);
}

TEST_CASE("matmul hand example") {
  Graph g;
  Var a = g.leaf(Array({2, 2}, {1, 2, 3, 4}));
  Var b = g.leaf(Array({2, 1}, {1, 1}));
  Var c = g.matmul(a, b);
  CHECK(c.val().shape() == doa::ad::Shape{2, 1});
  CHECK(c.val()[0] == doctest::Approx(3.0));
  CHECK(c.val()[1] == doctest::Approx(7.0));
}

TEST_CASE("matmul transpose flags match explicit transposition") {
  Rng rng(7);
  Array a = random_array({3, 4}, rng);
  Array at = Array::uninit({4, 3});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) at[j * 3 + i] = a[i * 4 + j];
  Array b = random_array({3, 5}, rng);
  Graph g;
  Var va = g.leaf(a), vat = g.leaf(at), vb = g.leaf(b);
  Var m1 = g.matmul(vat, vb);              // [4,3]x[3,5]
  Var m2 = g.matmul(va, vb, true, false);  // a^T x b
  for (std::size_t i = 0; i < m1.val().size(); ++i)
    CHECK(m1.val()[i] == doctest::Approx(m2.val()[i]).epsilon(1e-12));
}

TEST_CASE("batched matmul equals per-slice matmul") {
  Rng rng(11);
  Array a = random_array({3, 2, 4}, rng);
  Array b = random_array({4, 5}, rng);
  Graph g;
  Var out = g.matmul(g.leaf(a), g.leaf(b));
  CHECK(out.shape() == doa::ad::Shape{3, 2, 5});
  for (std::size_t s = 0; s < 3; ++s) {
    Array as = Array::uninit({2, 4});
    std::copy(a.data() + s * 8, a.data() + (s + 1) * 8, as.data());
    Graph g2;
    Var ref = g2.matmul(g2.leaf(as), g2.leaf(b));
    for (std::size_t i = 0; i < 10; ++i)
      CHECK(out.val()[s * 10 + i] == doctest::Approx(ref.val()[i]).epsilon(1e-12));
  }
}

TEST_CASE("softmax symmetry and sigmoid midpoint") {
  Graph g;
  Var s = g.softmax(g.leaf(Array({2}, {0.0, 0.0})), 0);
  CHECK(s.val()[0] == doctest::Approx(0.5));
  CHECK(s.val()[1] == doctest::Approx(0.5));
  Var sig = g.sigmoid(g.leaf(Array::scalar(0.0)));
  CHECK(sig.val()[0] == doctest::Approx(0.5));
}

TEST_CASE("backward on x^2 and sigmoid") {
  Graph g;
  Var x = g.leaf(Array::scalar(3.0), true);
  Var y = g.mul(x, x);
  g.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(6.0));

  Graph g2;
  Var x2 = g2.leaf(Array::scalar(0.0), true);
  Var y2 = g2.sigmoid(x2);
  g2.backward(y2);
  CHECK(x2.grad()[0] == doctest::Approx(0.25));
}

TEST_CASE("bilinear gradient") {
  Graph g;
  Var x = g.leaf(Array({2}, {1, 2}), true);
  Var y = g.leaf(Array({2}, {3, 4}), true);
  Var out = g.sum_all(g.mul(x, y));
  g.backward(out);
  CHECK(x.grad()[0] == doctest::Approx(3.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
  CHECK(y.grad()[0] == doctest::Approx(1.0));
  CHECK(y.grad()[1] == doctest::Approx(2.0));
}

TEST_CASE("backward requires scalar output") {
  Graph g;
  Var x = g.leaf(Array({2}, {1, 2}), true);
  CHECK_THROWS_AS(g.backward(x), Error);
}

TEST_CASE("unreachable leaves get zero gradients, repeated calls reset") {
  Graph g;
  Var x = g.leaf(Array::scalar(2.0), true);
  Var unused = g.leaf(Array::scalar(5.0), true);
  Var y = g.mul(x, x);
  g.backward(y);
  g.backward(y);  // accumulators must reset, not double
  CHECK(x.grad()[0] == doctest::Approx(4.0));
  CHECK(unused.grad()[0] == doctest::Approx(0.0));
}

TEST_CASE("grad_check over every primitive") {
  Rng rng(42);
  const double tol = 1e-5;
  const double eps = 1e-5;
  for (int rep = 0; rep < 10; ++rep) {
    // add / sub / mul with broadcast
    {
      Array a = random_array({3, 4}, rng);
      Array b = random_array({4}, rng);
      auto f = [](Graph& g, const std::vector<Var>& v) {
        return g.sum_all(g.mul(g.add(v[0], v[1]), g.sub(v[0], v[1])));
      };
      CHECK(grad_check(f, {a, b}, eps) < tol);
    }
    // matmul (plain and transposed)
    {
      Array a = random_array({3, 4}, rng);
      Array b = random_array({4, 2}, rng);
      auto f = [](Graph& g, const std::vector<Var>& v) {
        return g.sum_all(g.matmul(v[0], v[1]));
      };
      CHECK(grad_check(f, {a, b}, eps) < tol);
      auto ft = [](Graph& g, const std::vector<Var>& v) {
        return g.sum_all(g.mul(g.matmul(v[0], v[0], true, false),
                               g.matmul(v[0], v[0], false, true)));
      };
      Array sq = random_array({3, 3}, rng);
      CHECK(grad_check(ft, {sq}, eps) < tol);
    }
    // batched matmul
    {
      Array a = random_array({2, 3, 4}, rng);
      Array b = random_array({2, 4, 3}, rng);
      auto f = [](Graph& g, const std::vector<Var>& v) {
        return g.sum_all(g.matmul(v[0], v[1]));
      };
      CHECK(grad_check(f, {a, b}, eps) < tol);
    }
    // exp / tanh / sigmoid / relu / elu
    {
      Array a = random_array({8}, rng);
      auto f = [](Graph& g, const std::vector<Var>& v) {
        Var t = g.add(g.tanh(v[0]), g.sigmoid(v[0]));
        // keep relu away from the kink; |x| >= 1e-3 draws make this safe
        return g.sum_all(g.add(t, g.add(g.elu(v[0]), g.exp(v[0]))));
      };
      for (std::size_t i = 0; i < a.size(); ++i)
        if (std::abs(a[i]) < 1e-3) a[i] = 0.5;
      CHECK(grad_check(f, {a}, eps) < tol);
    }
    // log restricted to positive domain
    {
      Array a = random_array({6}, rng, 0.5, 2.0);
      auto f = [](Graph& g, const std::vector<Var>& v) { return g.sum_all(g.log(v[0])); };
      CHECK(grad_check(f, {a}, eps) < tol);
    }
    // softmax over each axis
    {
      Array a = random_array({3, 5}, rng);
      Array w = random_array({3, 5}, rng);
      for (std::size_t axis = 0; axis < 2; ++axis) {
        auto f = [axis, &w](Graph& g, const std::vector<Var>& v) {
          return g.sum_all(g.mul(g.softmax(v[0], axis), g.constant(w)));
        };
        CHECK(grad_check(f, {a}, eps) < tol);
      }
    }
    // sum / mean over axes
    {
      Array a = random_array({2, 3, 4}, rng);
      Array w = random_array({2, 4}, rng);
      auto f = [&w](Graph& g, const std::vector<Var>& v) {
        return g.sum_all(g.mul(g.mean(v[0], 1), g.constant(w)));
      };
      CHECK(grad_check(f, {a}, eps) < tol);
      auto f2 = [](Graph& g, const std::vector<Var>& v) {
        return g.mean_all(g.sum(v[0], 0));
      };
      CHECK(grad_check(f2, {a}, eps) < tol);
    }
    // concat / slice / reshape / broadcast_to
    {
      Array a = random_array({2, 3}, rng);
      Array b = random_array({2, 2}, rng);
      auto f = [](Graph& g, const std::vector<Var>& v) {
        Var cat = g.concat({v[0], v[1]}, 1);             // [2,5]
        Var sl = g.slice(cat, 1, 1, 3);                  // [2,3]
        Var rs = g.reshape(sl, {6});                     // [6]
        Var bc = g.broadcast_to(g.reshape(v[1], {4}), {3, 4});
        return g.add(g.sum_all(rs), g.sum_all(g.mul(bc, bc)));
      };
      CHECK(grad_check(f, {a, b}, eps) < tol);
    }
    // layer_norm
    {
      Array x = random_array({3, 6}, rng);
      Array sc = random_array({6}, rng, 0.5, 1.5);
      Array sh = random_array({6}, rng);
      Array w = random_array({3, 6}, rng);
      auto f = [&w](Graph& g, const std::vector<Var>& v) {
        return g.sum_all(g.mul(g.layer_norm(v[0], v[1], v[2]), g.constant(w)));
      };
      CHECK(grad_check(f, {x, sc, sh}, eps) < tol);
    }
    // fused lstm_step
    {
      std::size_t B = 2, dx = 3, H = 4;
      Array x = random_array({B, dx}, rng, -1, 1);
      Array h = random_array({B, H}, rng, -1, 1);
      Array c = random_array({B, H}, rng, -1, 1);
      Array wx = random_array({dx, 4 * H}, rng, -0.5, 0.5);
      Array wh = random_array({H, 4 * H}, rng, -0.5, 0.5);
      Array b = random_array({4 * H}, rng, -0.5, 0.5);
      Array w = random_array({B, 2 * H}, rng);
      auto f = [&w](Graph& g, const std::vector<Var>& v) {
        Var out = g.lstm_step(v[0], v[1], v[2], v[3], v[4], v[5]);
        return g.sum_all(g.mul(out, g.constant(w)));
      };
      CHECK(grad_check(f, {x, h, c, wx, wh, b}, eps) < tol);
    }
  }
}

TEST_CASE("grad_check oracle: sum(tanh(x)) below 1e-6") {
  Rng rng(3);
  Array x = random_array({8}, rng, -1.0, 1.0);
  auto f = [](Graph& g, const std::vector<Var>& v) { return g.sum_all(g.tanh(v[0])); };
  CHECK(grad_check(f, {x}, 1e-5) < 1e-6);
}

TEST_CASE("grad_check on a constant function returns zero error") {
  Array x({3}, {1, 2, 3});
  auto f = [](Graph& g, const std::vector<Var>& v) {
    return g.mul_scalar(g.sum_all(v[0]), 0.0);
  };
  CHECK(grad_check(f, {x}, 1e-5) == doctest::Approx(0.0));
}

TEST_CASE("grad_check validates eps") {
  Array x({1}, {1.0});
  auto f = [](Graph& g, const std::vector<Var>& v) { return g.sum_all(v[0]); };
  CHECK_THROWS_AS(grad_check(f, {x}, 0.0), Error);
  CHECK_THROWS_AS(grad_check(f, {x}, 0.1), Error);
}

TEST_CASE("linearity of backward") {
  // grad(a*f + b*g) == a*grad(f) + b*grad(g) to 1e-12
  Rng rng(9);
  Array x0 = random_array({5}, rng);
  const double a = 2.25, b = -0.75;

  auto gradient_of = [&](auto fn) {
    Graph g;
    Var x = g.leaf(x0, true);
    g.backward(fn(g, x));
    std::vector<double> out(x.grad().data(), x.grad().data() + x.grad().size());
    return out;
  };

  auto f = [](Graph& g, Var x) { return g.sum_all(g.tanh(x)); };
  auto h = [](Graph& g, Var x) { return g.sum_all(g.mul(x, x)); };
  auto combo = [&](Graph& g, Var x) {
    return g.add(g.mul_scalar(g.sum_all(g.tanh(x)), a),
                 g.mul_scalar(g.sum_all(g.mul(x, x)), b));
  };

  auto gf = gradient_of(f);
  auto gh = gradient_of(h);
  auto gc = gradient_of(combo);
  for (std::size_t i = 0; i < gf.size(); ++i)
    CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gh[i]).epsilon(1e-12));
}

TEST_CASE("identical graphs produce bit-identical values and gradients") {
  auto run = [](std::vector<double>& vals, std::vector<double>& grads) {
    Rng rng(1234);
    Graph g;
    Var x = g.leaf(random_array({4, 4}, rng), true);
    Var w = g.leaf(random_array({4, 4}, rng), true);
    Var y = g.sum_all(g.tanh(g.matmul(x, w)));
    g.backward(y);
    vals.assign(y.val().data(), y.val().data() + 1);
    grads.assign(w.grad().data(), w.grad().data() + w.grad().size());
  };
  std::vector<double> v1, g1, v2, g2;
  run(v1, g1);
  run(v2, g2);
  CHECK(v1 == v2);
  CHECK(g1 == g2);
}

TEST_CASE("shape mismatch and domain errors") {
  Graph g;
  Var a = g.leaf(Array({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = g.leaf(Array({2, 2}, {1, 2, 3, 4}));
  CHECK_THROWS_AS(g.add(a, b), Error);
  CHECK_THROWS_AS(g.matmul(a, a), Error);
  CHECK_THROWS_AS(g.log(g.leaf(Array::scalar(-1.0))), Error);
  try {
    g.add(a, b);
  } catch (const Error& e) {
    CHECK(e.code() == errc::shape_mismatch);
  }
}

TEST_CASE("lstm_step matches scalar re-implementation") {
  Rng rng(77);
  std::size_t B = 1, dx = 2, H = 4;
  Array x = random_array({B, dx}, rng, -1, 1);
  Array h = random_array({B, H}, rng, -1, 1);
  Array c = random_array({B, H}, rng, -1, 1);
  Array wx = random_array({dx, 4 * H}, rng, -0.7, 0.7);
  Array wh = random_array({H, 4 * H}, rng, -0.7, 0.7);
  Array bias = random_array({4 * H}, rng, -0.3, 0.3);

  Graph g;
  Var out = g.lstm_step(g.leaf(x), g.leaf(h), g.leaf(c), g.leaf(wx), g.leaf(wh), g.leaf(bias));

  auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t j = 0; j < H; ++j) {
    auto gate_pre = [&](std::size_t which) {
      double acc = bias[which * H + j];
      for (std::size_t k = 0; k < dx; ++k) acc += x[k] * wx[k * 4 * H + which * H + j];
      for (std::size_t k = 0; k < H; ++k) acc += h[k] * wh[k * 4 * H + which * H + j];
      return acc;
    };
    double ig = sigmoid(gate_pre(0));
    double fg = sigmoid(gate_pre(1));
    double gg = std::tanh(gate_pre(2));
    double og = sigmoid(gate_pre(3));
    double cn = fg * c[j] + ig * gg;
    double hn = og * std::tanh(cn);
    CHECK(out.val()[j] == doctest::Approx(hn).epsilon(1e-12));
    CHECK(out.val()[H + j] == doctest::Approx(cn).epsilon(1e-12));
  }
}
