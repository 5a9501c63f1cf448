#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "flowdistill/encoder.hpp"
#include "flowdistill/gradcheck.hpp"

using namespace fd;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.d_tok = 6;
  c.n_app = 3;
  c.n_geo = 4;
  c.n_points = 5;
  c.d_pcd = 4;
  c.d_state = 3;
  c.gate_hidden = 5;
  c.point_hidden = 4;
  c.state_hidden = 4;
  return c;
}

RawObservation random_obs(const EncoderConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return {rng.normal_tensor<float>({c.n_app, c.d_tok}), rng.normal_tensor<float>({c.n_geo, c.d_tok}),
          rng.normal_tensor<float>({c.n_points, 3}), rng.normal_tensor<float>({c.d_proprio})};
}

// Plain-loop attention: q + softmax(q Wq (kv Wk)^T / sqrt(d)) kv Wv.
std::vector<double> brute_attention(const TensorD& q, const TensorD& kv, const TensorD& wq, const TensorD& wk,
                                    const TensorD& wv, std::size_t nq, std::size_t nk, std::size_t d) {
  const auto proj = [&](const TensorD& x, const TensorD& w, std::size_t n) {
    std::vector<double> out(n * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < d; ++k) out[i * d + j] += x[i * d + k] * w[k * d + j];
    return out;
  };
  const auto Q = proj(q, wq, nq), K = proj(kv, wk, nk), V = proj(kv, wv, nk);
  std::vector<double> out(nq * d);
  for (std::size_t i = 0; i < nq; ++i) {
    std::vector<double> s(nk);
    for (std::size_t j = 0; j < nk; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += Q[i * d + k] * K[j * d + k];
      s[j] = dot / std::sqrt(static_cast<double>(d));
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0;
    for (double& v : s) z += (v = std::exp(v - mx));
    for (std::size_t k = 0; k < d; ++k) {
      double acc = 0;
      for (std::size_t j = 0; j < nk; ++j) acc += s[j] / z * V[j * d + k];
      out[i * d + k] = q[i * d + k] + acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("cross-attention with zero values is the residual identity") {
  const EncoderConfig c = small_config();
  Encoder<double> enc(c, 1);
  enc.params().at("attn_app.v").value.fill(0.0);
  Rng rng(2);
  const TensorD q = rng.normal_tensor<double>({1, 3, c.d_tok});
  Graph<double> g;
  Var out = enc.cross_attend(g, g.constant(q), g.constant(TensorD({1, 4, c.d_tok})), AttnDirection::kAppearanceQueries);
  CHECK(g.value(out) == q);
}

TEST_CASE("a single key token receives all attention") {
  const EncoderConfig c = small_config();
  Encoder<double> enc(c, 3);
  Rng rng(4);
  Graph<double> g;
  Var w;
  enc.cross_attend(g, g.constant(rng.normal_tensor<double>({2, 3, c.d_tok})),
                   g.constant(rng.normal_tensor<double>({2, 1, c.d_tok})), AttnDirection::kGeometryQueries, &w);
  for (double v : g.value(w).data()) CHECK(v == 1.0);
}

TEST_CASE("cross-attention matches a brute-force oracle") {
  const EncoderConfig c = small_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Encoder<double> enc(c, seed);
    Rng rng(seed + 100);
    const TensorD q = rng.normal_tensor<double>({1, 3, c.d_tok});
    const TensorD kv = rng.normal_tensor<double>({1, 4, c.d_tok});
    Graph<double> g;
    const TensorD out = g.value(enc.cross_attend(g, g.constant(q), g.constant(kv), AttnDirection::kAppearanceQueries));
    const auto ref = brute_attention(q, kv, enc.params().at("attn_app.q").value, enc.params().at("attn_app.k").value,
                                     enc.params().at("attn_app.v").value, 3, 4, c.d_tok);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(out[i] - ref[i]) <= 1e-5 * std::max(1.0, std::abs(ref[i])));
    }
  }
  Encoder<double> enc(c, 1);
  Graph<double> g;
  CHECK_THROWS_AS(enc.cross_attend(g, g.constant(TensorD({1, 3, c.d_tok})), g.constant(TensorD({1, 4, c.d_tok + 1})),
                                   AttnDirection::kAppearanceQueries),
                  ShapeError);
}

TEST_CASE("gate weights are normalized and symmetric at initialization") {
  const EncoderConfig c = small_config();
  Encoder<double> enc(c, 5);
  Rng rng(6);
  {
    const TensorD f = rng.normal_tensor<double>({1, 3, c.d_tok});
    Graph<double> g;
    auto [h, alpha] = enc.fuse_visual(g, g.constant(f), g.constant(f));
    CHECK(g.value(alpha)[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(g.value(alpha)[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  // Perturb the gate so the check is not trivially met by the zero init.
  for (auto& v : enc.params().at("gate.l2.w").value.data()) v = rng.normal();
  Graph<double> g;
  auto [h, alpha] = enc.fuse_visual(g, g.constant(rng.normal_tensor<double>({1000, 3, c.d_tok})),
                                    g.constant(rng.normal_tensor<double>({1000, 4, c.d_tok})));
  const TensorD& a = g.value(alpha);
  bool uneven = false;
  for (std::size_t i = 0; i < 1000; ++i) {
    CHECK(a[2 * i] >= 0.0);
    CHECK(a[2 * i + 1] >= 0.0);
    CHECK(std::abs(a[2 * i] + a[2 * i + 1] - 1.0) < 1e-6);
    uneven = uneven || std::abs(a[2 * i] - 0.5) > 1e-3;
  }
  CHECK(uneven);
}

TEST_CASE("point encoder is a max-pooled per-point MLP") {
  const EncoderConfig c = small_config();
  Encoder<float> enc(c, 7);
  Rng rng(8);
  const TensorF pts = rng.normal_tensor<float>({1, c.n_points, 3});
  const auto encode = [&](const TensorF& p) {
    Graph<float> g(false);
    return g.value(enc.encode_points(g, g.constant(p)));
  };
  const TensorF base = encode(pts);

  std::vector<std::size_t> order(c.n_points);
  std::iota(order.begin(), order.end(), 0);
  for (int trial = 0; trial < 10; ++trial) {
    std::reverse(order.begin(), order.end());
    std::rotate(order.begin(), order.begin() + trial % c.n_points, order.end());
    TensorF perm({1, c.n_points, 3});
    for (std::size_t i = 0; i < c.n_points; ++i)
      for (std::size_t k = 0; k < 3; ++k) perm[i * 3 + k] = pts[order[i] * 3 + k];
    CHECK(encode(perm) == base);
  }

  TensorF dup({1, 2 * c.n_points, 3});
  for (std::size_t i = 0; i < 2 * c.n_points; ++i)
    for (std::size_t k = 0; k < 3; ++k) dup[i * 3 + k] = pts[(i % c.n_points) * 3 + k];
  CHECK(encode(dup) == base);

  // Singleton: max over one point equals the MLP evaluated by hand.
  const TensorF one = TensorF::from({1, 1, 3}, {0.3f, -0.2f, 1.0f});
  const TensorF got = encode(one);
  const auto& P = enc.params();
  std::vector<double> h(c.point_hidden);
  for (std::size_t j = 0; j < c.point_hidden; ++j) {
    double a = P.at("points.l1.b").value[j];
    for (std::size_t k = 0; k < 3; ++k) a += one[k] * P.at("points.l1.w").value[k * c.point_hidden + j];
    h[j] = 0.5 * a * (1.0 + std::erf(a / std::sqrt(2.0)));
  }
  for (std::size_t j = 0; j < c.d_pcd; ++j) {
    double a = P.at("points.l2.b").value[j];
    for (std::size_t k = 0; k < c.point_hidden; ++k) a += h[k] * P.at("points.l2.w").value[k * c.d_pcd + j];
    CHECK(got[j] == doctest::Approx(a).epsilon(1e-5));
  }

  Graph<float> g(false);
  CHECK_THROWS_AS(enc.encode_points(g, g.constant(TensorF({1, 0, 3}))), Error);
}

TEST_CASE("point encoder permutation invariance at the default width") {
  EncoderConfig c;
  Encoder<float> enc(c, 17);
  Rng rng(18);
  const TensorF pts = rng.normal_tensor<float>({4, c.n_points, 3});
  const auto encode = [&](const TensorF& p) {
    Graph<float> g(false);
    return g.value(enc.encode_points(g, g.constant(p)));
  };
  const TensorF base = encode(pts);
  for (int trial = 0; trial < 20; ++trial) {
    TensorF perm = pts;
    for (std::size_t b = 0; b < 4; ++b) {
      for (std::size_t i = c.n_points - 1; i > 0; --i) {
        const std::size_t j = rng.index(i + 1);
        for (std::size_t k = 0; k < 3; ++k) std::swap(perm[(b * c.n_points + i) * 3 + k], perm[(b * c.n_points + j) * 3 + k]);
      }
    }
    CHECK(encode(perm) == base);
  }
}

TEST_CASE("state encoder") {
  const EncoderConfig c = small_config();
  Encoder<double> enc(c, 9);
  const TensorD s = TensorD::from({2, 2}, {0.1, -0.4, 0.7, 0.2});
  Graph<double> g1, g2;
  const TensorD a = g1.value(enc.encode_state(g1, g1.constant(s)));
  const TensorD b = g2.value(enc.encode_state(g2, g2.constant(s)));
  CHECK(a == b);
  CHECK(a.shape() == Shape{2, c.d_state});
  Graph<double> g3;
  CHECK_THROWS_AS(enc.encode_state(g3, g3.constant(TensorD({2, 3}))), ShapeError);

  const TensorD target = TensorD::from({2, 3}, {0.5, 0.1, -0.2, 0.0, 0.3, 0.9});
  const auto r = finite_diff_check(
      [&](Graph<double>& g) { return g.squared_error(enc.encode_state(g, g.constant(s)), g.constant(target)); },
      enc.params());
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("assembled embedding layout and gradients") {
  const EncoderConfig c = small_config();
  Encoder<double> enc(c, 10);
  for (auto& v : enc.params().at("gate.l2.w").value.data()) v = 0.3;
  enc.params().at("gate.l2.w").value[1] = -0.4;
  const RawObservation a = random_obs(c, 11);
  RawObservation b = a;
  b.proprio[0] += 0.5f;
  const RawObservation* both[] = {&a, &b};
  const auto batch = stack_observations<double>(c, both);
  Graph<double> g;
  const auto e = enc.assemble(g, batch);
  const TensorD& v = g.value(e.e_obs);
  REQUIRE(v.shape() == Shape{2, c.obs_dim()});
  const std::size_t state_begin = c.d_tok + c.d_pcd;
  for (std::size_t i = 0; i < c.obs_dim(); ++i) {
    if (i < state_begin) {
      CHECK(v[i] == v[c.obs_dim() + i]);
    }
  }
  bool state_differs = false;
  for (std::size_t i = state_begin; i < c.obs_dim(); ++i) state_differs = state_differs || v[i] != v[c.obs_dim() + i];
  CHECK(state_differs);

  const TensorD target = Rng(12).normal_tensor<double>({2, c.obs_dim()});
  GradCheckOptions opts;
  opts.max_entries_per_param = 10;
  const auto r = finite_diff_check(
      [&](Graph<double>& gg) { return gg.squared_error(enc.assemble(gg, batch).e_obs, gg.constant(target)); },
      enc.params(), opts);
  INFO("worst " << r.worst_param);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("observation validation") {
  const EncoderConfig c = small_config();
  RawObservation o = random_obs(c, 1);
  CHECK_NOTHROW(validate(c, o));
  RawObservation bad = o;
  bad.proprio = TensorF({3});
  CHECK_THROWS_AS(validate(c, bad), ShapeError);
  bad = o;
  bad.points = TensorF({0, 3});
  CHECK_THROWS_AS(validate(c, bad), Error);
  bad = o;
  bad.geometry[0] = std::nanf("");
  CHECK_THROWS_AS(validate(c, bad), NonFiniteError);
}

TEST_CASE("featurizer and full encoder snapshot") {
  EncoderConfig c;
  Featurizer feat(c);
  std::vector<float> occ(256, 0.0f), goal(256, 0.0f), sdf(256);
  for (std::size_t i = 0; i < 256; ++i) {
    occ[i] = (i % 16 > 6 && i % 16 < 9 && i / 16 > 6 && i / 16 < 9) ? 1.0f : 0.0f;
    goal[i] = i == 200 ? 1.0f : 0.0f;
    sdf[i] = static_cast<float>(i % 16) / 16.0f - 0.5f;
  }
  const TensorF app = feat.appearance_tokens(occ, goal);
  CHECK(app.shape() == Shape{16, 32});
  CHECK(feat.appearance_tokens(occ, goal) == app);
  CHECK(Featurizer(c).geometry_tokens(sdf) == feat.geometry_tokens(sdf));
  CHECK_THROWS_AS(feat.geometry_tokens(std::span<const float>(sdf).first(10)), ShapeError);

  RawObservation o{app, feat.geometry_tokens(sdf), TensorF({32, 3}, 0.25f), TensorF::from({2}, {0.1f, 0.2f})};
  Encoder<float> enc(c, 42);
  const RawObservation* one[] = {&o};
  const TensorF e1 = encode_observations(enc, one);
  const TensorF e2 = encode_observations(enc, one);
  CHECK(e1 == e2);
  CHECK(e1.shape() == Shape{1, 80});
  // Recorded from the first verified run.
  const float expected[] = {0.0711423308f, -0.226180315f, 0.0112037556f, 0.0103701241f};
  for (std::size_t i = 0; i < 4; ++i) CHECK(e1[i * 20] == doctest::Approx(expected[i]).epsilon(1e-4));
}
