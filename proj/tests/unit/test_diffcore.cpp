#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "flowdistill/adam.hpp"
#include "flowdistill/binary_io.hpp"
#include "flowdistill/checkpoint.hpp"
#include "flowdistill/gradcheck.hpp"
#include "flowdistill/graph.hpp"
#include "flowdistill/rng.hpp"

using namespace fd;

TEST_CASE("matmul forward by hand") {
  Graph<double> g;
  Var a = g.constant(TensorD::from({2, 2}, {1, 2, 3, 4}));
  Var b = g.constant(TensorD::from({2, 1}, {1, 1}));
  Var c = g.matmul(a, b);
  CHECK(g.shape(c) == Shape{2, 1});
  CHECK(g.value(c)[0] == 3.0);
  CHECK(g.value(c)[1] == 7.0);
}

TEST_CASE("softmax of equal logits is uniform") {
  Graph<float> g;
  Var s = g.softmax(g.constant(TensorF::from({2}, {0.f, 0.f})));
  CHECK(g.value(s)[0] == doctest::Approx(0.5));
  CHECK(g.value(s)[1] == doctest::Approx(0.5));
}

TEST_CASE("squared error of a tensor with itself is zero") {
  Graph<double> g;
  Var x = g.constant(TensorD::from({3}, {0.3, -1.0, 2.0}));
  CHECK(g.value(g.squared_error(x, x)).item() == 0.0);
}

TEST_CASE("shape mismatch names the op and both shapes") {
  Graph<double> g;
  Var a = g.constant(TensorD({2, 3}));
  Var b = g.constant(TensorD({4, 1}));
  try {
    g.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,1]") != std::string::npos);
  }
  CHECK_THROWS_AS(g.add(a, g.constant(TensorD({3, 2}))), ShapeError);
  CHECK_THROWS_AS(g.mul(a, b), ShapeError);
}

TEST_CASE("non-finite results are rejected") {
  Graph<double> g;
  Var x = g.constant(TensorD::from({1}, {1e308}));
  CHECK_THROWS_AS(g.scale(x, 1e10), NonFiniteError);
}

TEST_CASE("backward of sum(w*w) is 2w") {
  ParameterSet<double> ps;
  ps.add("w", TensorD::from({3}, {1, 2, 3}));
  Graph<double> g;
  Var w = g.param(ps[0]);
  g.backward(g.sum(g.mul(w, w)));
  CHECK(ps[0].grad[0] == 2.0);
  CHECK(ps[0].grad[1] == 4.0);
  CHECK(ps[0].grad[2] == 6.0);
}

TEST_CASE("parameter outside the loss gets zero gradient") {
  ParameterSet<double> ps;
  ps.add("used", TensorD::from({2}, {1, 2}));
  ps.add("unused", TensorD::from({2}, {5, 6}));
  Graph<double> g;
  Var u = g.param(ps[0]);
  g.param(ps[1]);
  g.backward(g.sum(u));
  CHECK(ps[1].grad[0] == 0.0);
  CHECK(ps[1].grad[1] == 0.0);
}

TEST_CASE("backward errors") {
  ParameterSet<double> ps;
  ps.add("w", TensorD::from({2}, {1, 2}));
  Graph<double> g;
  Var w = g.param(ps[0]);
  CHECK_THROWS_AS(g.backward(w), ShapeError);
  Var loss = g.sum(w);
  g.backward(loss);
  CHECK_THROWS_AS(g.backward(loss), Error);
  CHECK_THROWS_AS(g.sum(w), Error);
}

TEST_CASE("matmul squared-error gradient matches an independent finite-difference oracle") {
  // The oracle evaluates the loss with plain loops; only the analytic side uses the graph.
  Rng rng(11);
  const std::size_t m = 3, k = 4;
  std::vector<double> w(m * k), x(k), y(m);
  for (auto& v : w) v = rng.normal();
  for (auto& v : x) v = rng.normal();
  for (auto& v : y) v = rng.normal();

  auto loss_fn = [&](const std::vector<double>& wv) {
    double acc = 0;
    for (std::size_t i = 0; i < m; ++i) {
      double pred = 0;
      for (std::size_t j = 0; j < k; ++j) pred += wv[i * k + j] * x[j];
      acc += (pred - y[i]) * (pred - y[i]);
    }
    return acc / static_cast<double>(m);
  };

  ParameterSet<double> ps;
  ps.add("W", TensorD({m, k}, w));
  Graph<double> g;
  Var pred = g.matmul(g.param(ps[0]), g.constant(TensorD({k, 1}, x)));
  g.backward(g.squared_error(pred, g.constant(TensorD({m, 1}, y))));

  const double eps = 1e-4;
  for (std::size_t i = 0; i < w.size(); ++i) {
    auto up = w, down = w;
    up[i] += eps;
    down[i] -= eps;
    const double fd = (loss_fn(up) - loss_fn(down)) / (2 * eps);
    CHECK(std::abs(ps[0].grad[i] - fd) / (std::abs(fd) + 1e-12) < 1e-3);
  }
}

TEST_CASE("finite_diff_check: linear model is exact to 1e-6") {
  Rng rng(3);
  ParameterSet<double> ps;
  ps.add("W", rng.normal_tensor<double>({3, 2}));
  ps.add("b", rng.normal_tensor<double>({2}));
  const TensorD x = rng.normal_tensor<double>({5, 3});
  const TensorD y = rng.normal_tensor<double>({5, 2});
  auto build = [&](Graph<double>& g) {
    return g.squared_error(g.linear(g.constant(x), g.param(ps[0]), g.param(ps[1])), g.constant(y));
  };
  const auto r = finite_diff_check(build, ps);
  CHECK(r.max_rel_error < 1e-6);
  CHECK(r.probed == 8);
}

TEST_CASE("finite_diff_check: zero parameters returns 0") {
  ParameterSet<double> ps;
  auto build = [](Graph<double>& g) { return g.sum(g.constant(TensorD::from({2}, {1, 2}))); };
  CHECK(finite_diff_check(build, ps).max_rel_error == 0.0);
}

TEST_CASE("finite_diff_check: non-deterministic builder is an error") {
  ParameterSet<double> ps;
  ps.add("w", TensorD::from({1}, {1.0}));
  int calls = 0;
  auto build = [&](Graph<double>& g) {
    ++calls;
    return g.sum(g.scale(g.param(ps[0]), static_cast<double>(calls)));
  };
  CHECK_THROWS_AS(finite_diff_check(build, ps), Error);
}

namespace {

// One randomized gradient check per op kind, in extended precision.
double check_op(OpKind kind, std::uint64_t seed) {
  Rng rng(seed);
  ParameterSet<double> ps;
  auto add = [&](const char* name, Shape s) { return ps.add(name, rng.normal_tensor<double>(std::move(s))); };
  const TensorD probe_weights = rng.normal_tensor<double>({64});
  LossBuilder body;
  // Contracting against fixed random weights makes every output coordinate matter.
  auto reduce = [probe_weights](Graph<double>& g, Var v) {
    const std::size_t n = shape_numel(g.shape(v));
    TensorD w({n});
    for (std::size_t i = 0; i < n; ++i) w[i] = probe_weights[i % 64] + 0.1 * static_cast<double>(i % 7);
    return g.sum(g.mul(g.reshape(v, {n}), g.constant(w)));
  };
  switch (kind) {
    case OpKind::kMatmul: {
      add("a", {2, 3, 4});
      add("b", {4, 5});
      body = [&, reduce](Graph<double>& g) { return reduce(g, g.matmul(g.param(ps[0]), g.param(ps[1]))); };
      break;
    }
    case OpKind::kAdd: {
      add("a", {3, 4});
      add("bias", {4});
      add("c", {3, 4});
      body = [&, reduce](Graph<double>& g) {
        return reduce(g, g.add(g.add(g.param(ps[0]), g.param(ps[1])), g.param(ps[2])));
      };
      break;
    }
    case OpKind::kMul: {
      add("a", {3, 4});
      add("b", {3, 4});
      body = [&, reduce](Graph<double>& g) { return reduce(g, g.mul(g.param(ps[0]), g.param(ps[1]))); };
      break;
    }
    case OpKind::kScale: {
      add("a", {5});
      body = [&, reduce](Graph<double>& g) { return reduce(g, g.scale(g.param(ps[0]), -1.7)); };
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      add("a", {2, 3});
      body = [&, kind](Graph<double>& g) {
        Var a = g.param(ps[0]);
        Var r = kind == OpKind::kSum ? g.sum(g.mul(a, a)) : g.mean(g.mul(a, a));
        return r;
      };
      break;
    }
    case OpKind::kConcat: {
      add("a", {2, 3, 2});
      add("b", {2, 1, 2});
      body = [&, reduce](Graph<double>& g) {
        const Var parts[] = {g.param(ps[0]), g.param(ps[1])};
        return reduce(g, g.concat(parts, 1));
      };
      break;
    }
    case OpKind::kSlice: {
      add("a", {3, 5});
      body = [&, reduce](Graph<double>& g) { return reduce(g, g.slice(g.param(ps[0]), 1, 1, 4)); };
      break;
    }
    case OpKind::kTranspose: {
      add("a", {2, 3, 4});
      body = [&, reduce](Graph<double>& g) { return reduce(g, g.transpose(g.param(ps[0]))); };
      break;
    }
    case OpKind::kRelu:
    case OpKind::kGelu:
    case OpKind::kTanh:
    case OpKind::kSigmoid:
    case OpKind::kSoftmax: {
      add("a", {3, 4});
      body = [&, kind, reduce](Graph<double>& g) {
        const Var a = g.param(ps[0]);
        return reduce(g, g.record(kind, std::span<const Var>(&a, 1)));
      };
      break;
    }
    case OpKind::kLayerNorm: {
      add("x", {3, 6});
      add("gamma", {6});
      add("beta", {6});
      body = [&, reduce](Graph<double>& g) {
        return reduce(g, g.layernorm(g.param(ps[0]), g.param(ps[1]), g.param(ps[2])));
      };
      break;
    }
    case OpKind::kSquaredError: {
      add("p", {4, 2});
      add("t", {4, 2});
      body = [&](Graph<double>& g) { return g.squared_error(g.param(ps[0]), g.param(ps[1])); };
      break;
    }
    case OpKind::kReshape: {
      add("a", {2, 6});
      body = [&, reduce](Graph<double>& g) { return reduce(g, g.tanh(g.reshape(g.param(ps[0]), {3, 4}))); };
      break;
    }
    case OpKind::kBatchMatmul: {
      add("a", {2, 3, 4});
      add("b", {2, 4, 2});
      body = [&, reduce](Graph<double>& g) { return reduce(g, g.bmm(g.param(ps[0]), g.param(ps[1]))); };
      break;
    }
    case OpKind::kConv1d: {
      add("x", {2, 7, 3});
      add("w", {3, 3, 4});
      add("b", {4});
      const std::size_t stride = 1 + seed % 2;
      body = [&, reduce, stride](Graph<double>& g) {
        return reduce(g, g.conv1d(g.param(ps[0]), g.param(ps[1]), g.param(ps[2]), stride));
      };
      break;
    }
    case OpKind::kUpsample2: {
      add("x", {2, 3, 2});
      body = [&, reduce](Graph<double>& g) { return reduce(g, g.upsample2(g.param(ps[0]))); };
      break;
    }
    case OpKind::kFilm: {
      add("x", {2, 3, 4});
      add("gamma", {2, 4});
      add("beta", {2, 4});
      body = [&, reduce](Graph<double>& g) {
        return reduce(g, g.film(g.param(ps[0]), g.param(ps[1]), g.param(ps[2])));
      };
      break;
    }
    case OpKind::kRowScale: {
      add("x", {3, 2, 2});
      add("s", {3});
      body = [&, reduce](Graph<double>& g) { return reduce(g, g.rowscale(g.param(ps[0]), g.param(ps[1]))); };
      break;
    }
    case OpKind::kMeanTokens:
    case OpKind::kMaxTokens: {
      add("x", {2, 5, 3});
      body = [&, kind, reduce](Graph<double>& g) {
        Var x = g.param(ps[0]);
        return reduce(g, kind == OpKind::kMeanTokens ? g.mean_tokens(x) : g.max_tokens(x));
      };
      break;
    }
    default:
      return 0.0;
  }
  return finite_diff_check(body, ps).max_rel_error;
}

}  // namespace

TEST_CASE("every op kind passes a randomized finite-difference check") {
  const OpKind kinds[] = {OpKind::kMatmul, OpKind::kAdd,        OpKind::kMul,        OpKind::kScale,
                          OpKind::kSum,    OpKind::kMean,       OpKind::kConcat,     OpKind::kSlice,
                          OpKind::kTranspose, OpKind::kRelu,    OpKind::kGelu,       OpKind::kTanh,
                          OpKind::kSigmoid, OpKind::kSoftmax,   OpKind::kLayerNorm,  OpKind::kSquaredError,
                          OpKind::kReshape, OpKind::kBatchMatmul, OpKind::kConv1d,   OpKind::kUpsample2,
                          OpKind::kFilm,   OpKind::kRowScale,   OpKind::kMeanTokens, OpKind::kMaxTokens};
  for (OpKind kind : kinds) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      CAPTURE(op_name(kind));
      CAPTURE(seed);
      CHECK(check_op(kind, seed) < 1e-3);
    }
  }
}

TEST_CASE("chain rule through a composite matches finite differences of the composite") {
  Rng rng(21);
  ParameterSet<double> ps;
  ps.add("w1", rng.normal_tensor<double>({3, 5}));
  ps.add("w2", rng.normal_tensor<double>({5, 2}));
  const TensorD x = rng.normal_tensor<double>({4, 3});
  auto build = [&](Graph<double>& g) {
    Var h = g.gelu(g.matmul(g.constant(x), g.param(ps[0])));
    Var o = g.softmax(g.tanh(g.matmul(h, g.param(ps[1]))));
    return g.mean(g.mul(o, o));
  };
  CHECK(finite_diff_check(build, ps).max_rel_error < 1e-3);
}

TEST_CASE("identical seed and op sequence give bit-identical values and gradients") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    ParameterSet<float> ps;
    ps.add("w", rng.normal_tensor<float>({8, 4}));
    const TensorF x = rng.normal_tensor<float>({6, 8});
    Graph<float> g;
    Var out = g.gelu(g.matmul(g.constant(x), g.param(ps[0])));
    Var loss = g.mean(g.mul(out, out));
    const float lv = g.value(loss).item();
    g.backward(loss);
    return std::make_pair(lv, ps[0].grad);
  };
  const auto a = run(5), b = run(5);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  ParameterSet<float> ps;
  ps.add("w", TensorF::from({3}, {1.f, -2.f, 0.5f}));
  Adam<float> opt({.lr = 0.1});
  opt.step(ps);
  CHECK(ps[0].value == TensorF::from({3}, {1.f, -2.f, 0.5f}));
  CHECK(opt.state().step == 1);
}

TEST_CASE("adam: first step with unit gradient moves by lr") {
  // Hand trace: m=0.1, v=0.001, m_hat=1, v_hat=1, step=lr/(1+eps).
  ParameterSet<double> ps;
  ps.add("w", TensorD::from({1}, {0.0}));
  ps[0].grad[0] = 1.0;
  Adam<double> opt({.lr = 0.1});
  opt.step(ps);
  CHECK(ps[0].value[0] == doctest::Approx(-0.1).epsilon(1e-9));
}

TEST_CASE("adam: 200 steps on (w-3)^2 converge and match a scalar reference run") {
  // Reference: the scalar Adam recursion written out independently.
  double ref = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2.0 * (ref - 3.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    ref -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
  }
  ParameterSet<double> ps;
  ps.add("w", TensorD::from({1}, {0.0}));
  Adam<double> opt({.lr = 0.1});
  for (int t = 0; t < 200; ++t) {
    ps.zero_grad();
    Graph<double> g;
    Var d = g.add(g.param(ps[0]), g.constant(TensorD::from({1}, {-3.0})));
    g.backward(g.sum(g.mul(d, d)));
    opt.step(ps);
  }
  CHECK(std::abs(ps[0].value[0] - 3.0) < 0.05);
  CHECK(ps[0].value[0] == doctest::Approx(ref).epsilon(1e-12));
}

TEST_CASE("adam: shape mismatch is an error") {
  AdamState<float> st;
  TensorF p({2}), g({3});
  Tensor<float>* ps[] = {&p};
  const Tensor<float>* gs[] = {&g};
  CHECK_THROWS_AS(adam_step<float>(st, ps, gs), ShapeError);
}

TEST_CASE("checkpoint round trip preserves names, shapes and values") {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    ParameterSet<float> ps;
    const std::size_t count = 1 + rng.index(4);
    for (std::size_t i = 0; i < count; ++i) {
      Shape s;
      const std::size_t rank = rng.index(4);
      for (std::size_t r = 0; r < rank; ++r) s.push_back(1 + rng.index(4));
      ps.add("layer" + std::to_string(i) + ".w", rng.normal_tensor<float>(s));
    }
    const auto back = decode_checkpoint(encode_checkpoint(ps));
    REQUIRE(back.size() == ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      CHECK(back[i].name == ps[i].name);
      CHECK(back[i].value == ps[i].value);
    }
  }
}

TEST_CASE("checkpoint layout is the documented little-endian byte sequence") {
  ParameterSet<float> ps;
  ps.add("ab", TensorF::from({2}, {1.0f, -2.0f}));
  const auto bytes = encode_checkpoint(ps);
  const std::vector<std::uint8_t> expected = {'F', 'D', 'C', 'K', 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 'a', 'b', 1,
                                              2,   0,   0,   0,   0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0};
  CHECK(bytes == expected);
}

TEST_CASE("checkpoint loader rejects bad magic, truncation and trailing bytes") {
  ParameterSet<float> ps;
  ps.add("w", TensorF::from({2}, {1.f, 2.f}));
  auto bytes = encode_checkpoint(ps);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  auto cut = bytes;
  cut.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(cut), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(extra), FormatError);
}
