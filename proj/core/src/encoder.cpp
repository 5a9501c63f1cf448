#include "flowdistill/encoder.hpp"

#include <cmath>
#include <tuple>

namespace fd {

void validate(const EncoderConfig& cfg) {
  if (cfg.d_tok == 0 || cfg.n_app == 0 || cfg.n_geo == 0) throw Error("encoder: token counts and width must be positive");
  if (cfg.n_points == 0) throw Error("encoder: point set must hold at least one point");
  if (cfg.d_proprio == 0 || cfg.d_pcd == 0 || cfg.d_state == 0) throw Error("encoder: output widths must be positive");
  if (cfg.gate_hidden == 0 || cfg.point_hidden == 0 || cfg.state_hidden == 0) {
    throw Error("encoder: hidden widths must be positive");
  }
}

void validate(const EncoderConfig& cfg, const RawObservation& obs) {
  const auto expect = [](const TensorF& t, const Shape& s, const char* what) {
    if (t.shape() != s) {
      throw ShapeError(std::string("observation: ") + what + " expected " + shape_str(s) + ", got " +
                       shape_str(t.shape()));
    }
    if (!t.all_finite()) throw NonFiniteError(std::string("observation: ") + what + " is not finite");
  };
  if (obs.points.rank() == 2 && obs.points.dim(0) == 0) throw Error("observation: empty point set");
  expect(obs.appearance, {cfg.n_app, cfg.d_tok}, "appearance tokens");
  expect(obs.geometry, {cfg.n_geo, cfg.d_tok}, "geometry tokens");
  expect(obs.points, {cfg.n_points, 3}, "point set");
  expect(obs.proprio, {cfg.d_proprio}, "proprio");
}

template <typename T>
ObsBatch<T> stack_observations(const EncoderConfig& cfg, std::span<const RawObservation* const> obs) {
  const std::size_t b = obs.size();
  if (b == 0) throw Error("stack_observations: empty batch");
  ObsBatch<T> out{Tensor<T>({b, cfg.n_app, cfg.d_tok}), Tensor<T>({b, cfg.n_geo, cfg.d_tok}),
                  Tensor<T>({b, cfg.n_points, 3}), Tensor<T>({b, cfg.d_proprio})};
  const auto copy_into = [](Tensor<T>& dst, std::size_t i, const TensorF& src) {
    T* p = dst.ptr() + i * src.size();
    for (std::size_t k = 0; k < src.size(); ++k) p[k] = static_cast<T>(src[k]);
  };
  for (std::size_t i = 0; i < b; ++i) {
    validate(cfg, *obs[i]);
    copy_into(out.appearance, i, obs[i]->appearance);
    copy_into(out.geometry, i, obs[i]->geometry);
    copy_into(out.points, i, obs[i]->points);
    copy_into(out.proprio, i, obs[i]->proprio);
  }
  return out;
}

Featurizer::Featurizer(const EncoderConfig& enc, const FeaturizerConfig& cfg) : cfg_(cfg), d_tok_(enc.d_tok) {
  if (cfg_.patch == 0 || cfg_.grid % cfg_.patch != 0) throw Error("featurizer: grid must be a multiple of patch");
  if (tokens() != enc.n_app || tokens() != enc.n_geo) {
    throw Error("featurizer: " + std::to_string(tokens()) + " patches but the encoder expects " +
                std::to_string(enc.n_app) + " appearance and " + std::to_string(enc.n_geo) + " geometry tokens");
  }
  Rng rng(cfg_.seed);
  const std::size_t px = cfg_.patch * cfg_.patch;
  const auto gaussian = [&](Shape s, double stddev) {
    TensorF t(std::move(s));
    for (auto& v : t.data()) v = static_cast<float>(stddev * rng.normal());
    return t;
  };
  app_proj_ = gaussian({2 * px, d_tok_}, 1.0 / std::sqrt(static_cast<double>(2 * px)));
  geo_proj_ = gaussian({px, d_tok_}, 1.0 / std::sqrt(static_cast<double>(px)));
  app_pos_ = gaussian({tokens(), d_tok_}, 0.5);
  geo_pos_ = gaussian({tokens(), d_tok_}, 0.5);
}

TensorF Featurizer::project(std::span<const std::span<const float>> channels, const TensorF& proj,
                            const TensorF& pos) const {
  const std::size_t n = cfg_.grid, p = cfg_.patch, per_row = n / p, px = p * p;
  for (const auto& c : channels) {
    if (c.size() != n * n) throw ShapeError("featurizer: raster has " + std::to_string(c.size()) + " cells, expected " +
                                            std::to_string(n * n));
  }
  TensorF out({tokens(), d_tok_});
  std::vector<float> patch(channels.size() * px);
  for (std::size_t tok = 0; tok < tokens(); ++tok) {
    const std::size_t r0 = (tok / per_row) * p, c0 = (tok % per_row) * p;
    for (std::size_t ch = 0; ch < channels.size(); ++ch) {
      for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t j = 0; j < p; ++j) patch[ch * px + i * p + j] = channels[ch][(r0 + i) * n + c0 + j];
      }
    }
    for (std::size_t d = 0; d < d_tok_; ++d) {
      double acc = pos[tok * d_tok_ + d];
      for (std::size_t f = 0; f < patch.size(); ++f) acc += static_cast<double>(patch[f]) * proj[f * d_tok_ + d];
      out[tok * d_tok_ + d] = static_cast<float>(acc);
    }
  }
  return out;
}

TensorF Featurizer::appearance_tokens(std::span<const float> occupancy, std::span<const float> goal) const {
  const std::span<const float> ch[] = {occupancy, goal};
  return project(ch, app_proj_, app_pos_);
}

TensorF Featurizer::geometry_tokens(std::span<const float> sdf) const {
  const std::span<const float> ch[] = {sdf};
  return project(ch, geo_proj_, geo_pos_);
}

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  Rng rng(seed);
  build_manifest(&rng);
}

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& cfg, ParameterSet<T> params) : cfg_(cfg) {
  validate(cfg_);
  build_manifest(nullptr);
  params_.assign_from(params);
}

template <typename T>
std::size_t Encoder<T>::add_param(const std::string& name, Shape shape, double stddev, Rng* rng) {
  Tensor<T> t(std::move(shape));
  if (rng && stddev > 0) {
    for (auto& v : t.data()) v = static_cast<T>(stddev * rng->normal());
  }
  return params_.add(name, std::move(t));
}

template <typename T>
typename Encoder<T>::Mlp Encoder<T>::add_mlp(const std::string& name, std::size_t in, std::size_t hidden,
                                             std::size_t out, bool zero_last, Rng* rng) {
  Mlp m;
  m.w1 = add_param(name + ".l1.w", {in, hidden}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  m.b1 = add_param(name + ".l1.b", {hidden}, 0.0, rng);
  m.w2 = add_param(name + ".l2.w", {hidden, out}, zero_last ? 0.0 : 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  m.b2 = add_param(name + ".l2.b", {out}, 0.0, rng);
  return m;
}

template <typename T>
void Encoder<T>::build_manifest(Rng* rng) {
  const std::size_t d = cfg_.d_tok;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  attn_app_ = {add_param("attn_app.q", {d, d}, s, rng), add_param("attn_app.k", {d, d}, s, rng),
               add_param("attn_app.v", {d, d}, s, rng)};
  attn_geo_ = {add_param("attn_geo.q", {d, d}, s, rng), add_param("attn_geo.k", {d, d}, s, rng),
               add_param("attn_geo.v", {d, d}, s, rng)};
  // Zero output layer: the gate starts at alpha = [0.5, 0.5] for every input.
  gate_ = add_mlp("gate", 2 * d, cfg_.gate_hidden, 2, true, rng);
  points_ = add_mlp("points", 3, cfg_.point_hidden, cfg_.d_pcd, false, rng);
  state_ = add_mlp("state", cfg_.d_proprio, cfg_.state_hidden, cfg_.d_state, false, rng);
}

template <typename T>
Var Encoder<T>::run_mlp(Graph<T>& g, const Mlp& m, Var x) {
  Var h = g.gelu(g.linear(x, g.param(params_[m.w1]), g.param(params_[m.b1])));
  return g.linear(h, g.param(params_[m.w2]), g.param(params_[m.b2]));
}

template <typename T>
Var Encoder<T>::cross_attend(Graph<T>& g, Var queries, Var keys_values, AttnDirection dir, Var* weights) {
  const Shape& qs = g.shape(queries);
  const Shape& ks = g.shape(keys_values);
  if (qs.size() != 3 || ks.size() != 3 || qs[0] != ks[0] || qs[2] != cfg_.d_tok || ks[2] != cfg_.d_tok) {
    throw ShapeError("cross_attend: queries " + shape_str(qs) + " and keys/values " + shape_str(ks) +
                     " must be [B,N," + std::to_string(cfg_.d_tok) + "] with equal B");
  }
  const Attn& a = dir == AttnDirection::kAppearanceQueries ? attn_app_ : attn_geo_;
  Var q = g.matmul(queries, g.param(params_[a.q]));
  Var k = g.matmul(keys_values, g.param(params_[a.k]));
  Var v = g.matmul(keys_values, g.param(params_[a.v]));
  Var scores = g.scale(g.bmm(q, g.transpose(k)), 1.0 / std::sqrt(static_cast<double>(cfg_.d_tok)));
  Var w = g.softmax(scores);
  if (weights) *weights = w;
  return g.add(queries, g.bmm(w, v));
}

template <typename T>
std::pair<Var, Var> Encoder<T>::fuse_visual(Graph<T>& g, Var f_rgb, Var f_depth) {
  Var rgb = cross_attend(g, f_rgb, f_depth, AttnDirection::kAppearanceQueries);
  Var depth = cross_attend(g, f_depth, f_rgb, AttnDirection::kGeometryQueries);
  Var pr = g.mean_tokens(rgb);
  Var pd = g.mean_tokens(depth);
  const Var pooled[] = {pr, pd};
  Var alpha = g.softmax(run_mlp(g, gate_, g.concat(pooled, 1)));
  Var h = g.add(g.rowscale(pr, g.slice(alpha, 1, 0, 1)), g.rowscale(pd, g.slice(alpha, 1, 1, 2)));
  return {h, alpha};
}

template <typename T>
Var Encoder<T>::encode_points(Graph<T>& g, Var points) {
  const Shape& s = g.shape(points);
  if (s.size() != 3 || s[2] != 3) throw ShapeError("encode_points: expected [B,N,3], got " + shape_str(s));
  if (s[1] == 0) throw Error("encode_points: empty point set");
  return g.max_tokens(run_mlp(g, points_, points));
}

template <typename T>
Var Encoder<T>::encode_state(Graph<T>& g, Var proprio) {
  const Shape& s = g.shape(proprio);
  if (s.size() != 2 || s[1] != cfg_.d_proprio) {
    throw ShapeError("encode_state: expected [B," + std::to_string(cfg_.d_proprio) + "], got " + shape_str(s));
  }
  return run_mlp(g, state_, proprio);
}

template <typename T>
EncodedObs<T> Encoder<T>::assemble(Graph<T>& g, const ObsBatch<T>& batch) {
  EncodedObs<T> out;
  std::tie(out.h_vis, out.alpha) = fuse_visual(g, g.constant(batch.appearance), g.constant(batch.geometry));
  out.h_pcd = encode_points(g, g.constant(batch.points));
  out.h_state = encode_state(g, g.constant(batch.proprio));
  const Var parts[] = {out.h_vis, out.h_pcd, out.h_state};
  out.e_obs = g.concat(parts, 1);
  return out;
}

TensorF encode_observations(Encoder<float>& enc, std::span<const RawObservation* const> obs, TensorF* alpha) {
  Graph<float> g(false);
  const auto batch = stack_observations<float>(enc.config(), obs);
  const auto e = enc.assemble(g, batch);
  if (alpha) *alpha = g.value(e.alpha);
  return g.value(e.e_obs);
}

template ObsBatch<float> stack_observations<float>(const EncoderConfig&, std::span<const RawObservation* const>);
template ObsBatch<double> stack_observations<double>(const EncoderConfig&, std::span<const RawObservation* const>);
template class Encoder<float>;
template class Encoder<double>;

}  // namespace fd
