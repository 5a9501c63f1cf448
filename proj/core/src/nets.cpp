#include "flowdistill/nets.hpp"

#include <algorithm>
#include <cmath>

namespace fd {

void validate(const NetConfig& cfg) {
  if (cfg.horizon == 0 || cfg.horizon % 2 != 0) throw Error("network: horizon must be a positive even number");
  if (cfg.action_dim == 0) throw Error("network: action_dim must be positive");
  if (cfg.channels_lo == 0 || cfg.channels_hi == 0) throw Error("network: channel widths must be positive");
  if (cfg.embed_dim == 0 || cfg.embed_dim % 2 != 0) throw Error("network: embed_dim must be a positive even number");
  if (cfg.kernel % 2 == 0) throw Error("network: kernel must be odd");
  if (cfg.obs_dim == 0) throw Error("network: obs_dim must be positive");
  if (!(cfg.action_scale > 0)) throw Error("network: action_scale must be positive");
}

std::vector<double> sinusoidal_embed(double t, std::size_t dim) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("sinusoidal_embed: t=" + std::to_string(t) + " outside [0,1]");
  if (dim == 0 || dim % 2 != 0) throw Error("sinusoidal_embed: dimension must be a positive even number");
  // Flow time is stretched to [0, 1000] so the fastest frequency resolves fine steps.
  const double pos = 1000.0 * t;
  const std::size_t half = dim / 2;
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out[2 * i] = std::sin(pos * freq);
    out[2 * i + 1] = std::cos(pos * freq);
  }
  return out;
}

double mask_probability(double t) { return std::clamp((t - 0.5) / 0.5, 0.0, 1.0); }

template <typename T>
Tensor<T> draw_keep_mask(std::span<const double> times, Rng& rng) {
  Tensor<T> keep({times.size()});
  for (std::size_t i = 0; i < times.size(); ++i) keep[i] = rng.bernoulli(mask_probability(times[i])) ? T(0) : T(1);
  return keep;
}

template <typename T>
Var mask_noise_embedding(Graph<T>& g, Var features, std::span<const double> times, Rng& rng) {
  return g.rowscale(features, g.constant(draw_keep_mask<T>(times, rng)));
}

bool is_time_conditioning(const std::string& name) {
  return name.rfind("time_mlp.", 0) == 0 || name.find(".film_time.") != std::string::npos;
}

template <typename T>
TrajectoryNet<T>::TrajectoryNet(const NetConfig& cfg, bool time_conditioned, std::uint64_t seed)
    : cfg_(cfg), time_conditioned_(time_conditioned) {
  validate(cfg_);
  Rng rng(seed);
  build_manifest(&rng);
}

template <typename T>
TrajectoryNet<T>::TrajectoryNet(const NetConfig& cfg, bool time_conditioned, ParameterSet<T> params)
    : cfg_(cfg), time_conditioned_(time_conditioned) {
  validate(cfg_);
  build_manifest(nullptr);
  params_.assign_from(params);
}

template <typename T>
std::size_t TrajectoryNet<T>::add_param(const std::string& name, Shape shape, double stddev, Rng* rng) {
  Tensor<T> t(std::move(shape));
  if (rng && stddev > 0) {
    for (auto& v : t.data()) v = static_cast<T>(stddev * rng->normal());
  }
  return params_.add(name, std::move(t));
}

template <typename T>
typename TrajectoryNet<T>::Block TrajectoryNet<T>::make_block(const std::string& name, std::size_t cin,
                                                              std::size_t cout, Rng* rng) {
  Block b;
  b.cout = cout;
  const double conv_std = std::sqrt(2.0 / static_cast<double>(cfg_.kernel * cin));
  b.conv_w = add_param(name + ".conv.w", {cfg_.kernel, cin, cout}, conv_std, rng);
  b.conv_b = add_param(name + ".conv.b", {cout}, 0.0, rng);
  const double film_std = 0.5 / std::sqrt(static_cast<double>(cfg_.obs_dim));
  b.film_w = add_param(name + ".film_obs.w", {cfg_.obs_dim, 2 * cout}, film_std, rng);
  b.film_b = add_param(name + ".film_obs.b", {2 * cout}, 0.0, rng);
  return b;
}

template <typename T>
void TrajectoryNet<T>::build_manifest(Rng* rng) {
  const std::size_t lo = cfg_.channels_lo, hi = cfg_.channels_hi, d = cfg_.action_dim;
  in_w_ = add_param("in_proj.w", {d, lo}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  in_b_ = add_param("in_proj.b", {lo}, 0.0, rng);
  enc_ = make_block("enc", lo, lo, rng);
  down_ = make_block("down", lo, hi, rng);
  mid_ = make_block("mid", hi, hi, rng);
  up_ = make_block("up", hi + lo, lo, rng);
  out_w_ = add_param("out_proj.w", {lo, d}, 1.0 / std::sqrt(static_cast<double>(lo)), rng);
  out_b_ = add_param("out_proj.b", {d}, 0.0, rng);

  if (!time_conditioned_) return;
  // Separate stream: the shared blocks initialize identically with or without time conditioning.
  Rng trng(rng ? derive_seed(rng->next_u64(), 0x7157) : 0);
  Rng* tr = rng ? &trng : nullptr;
  const std::size_t e = cfg_.embed_dim, th = cfg_.time_hidden;
  t1_w_ = add_param("time_mlp.l1.w", {e, th}, 1.0 / std::sqrt(static_cast<double>(e)), tr);
  t1_b_ = add_param("time_mlp.l1.b", {th}, 0.0, tr);
  t2_w_ = add_param("time_mlp.l2.w", {th, e}, 1.0 / std::sqrt(static_cast<double>(th)), tr);
  t2_b_ = add_param("time_mlp.l2.b", {e}, 0.0, tr);
  const double film_std = 0.5 / std::sqrt(static_cast<double>(e));
  for (auto* blk : {&enc_, &down_, &mid_, &up_}) {
    const std::string prefix = params_[blk->conv_w].name.substr(0, params_[blk->conv_w].name.find('.'));
    blk->film_time_w = add_param(prefix + ".film_time.w", {e, 2 * blk->cout}, film_std, tr);
  }
}

template <typename T>
Var TrajectoryNet<T>::run_block(Graph<T>& g, const Block& b, Var x, Var e_obs, Var temb, std::size_t stride) {
  Var h = g.conv1d(x, g.param(params_[b.conv_w]), g.param(params_[b.conv_b]), stride);
  Var mod = g.linear(e_obs, g.param(params_[b.film_w]), g.param(params_[b.film_b]));
  if (time_conditioned_) mod = g.add(mod, g.matmul(temb, g.param(params_[b.film_time_w])));
  Var gamma = g.slice(mod, 1, 0, b.cout);
  Var beta = g.slice(mod, 1, b.cout, 2 * b.cout);
  return g.gelu(g.film(h, gamma, beta));
}

template <typename T>
Var TrajectoryNet<T>::forward(Graph<T>& g, Var traj, Var e_obs, std::span<const double> times, const Tensor<T>* keep) {
  const Shape& ts = g.shape(traj);
  if (ts.size() != 3 || ts[1] != cfg_.horizon || ts[2] != cfg_.action_dim) {
    throw ShapeError("trajectory net: expected trajectory shape [B," + std::to_string(cfg_.horizon) + "," +
                     std::to_string(cfg_.action_dim) + "], got " + shape_str(ts));
  }
  const std::size_t batch = ts[0];
  const Shape& es = g.shape(e_obs);
  if (es.size() != 2 || es[0] != batch || es[1] != cfg_.obs_dim) {
    throw ShapeError("trajectory net: expected E_obs shape [" + std::to_string(batch) + "," +
                     std::to_string(cfg_.obs_dim) + "], got " + shape_str(es));
  }

  Var temb{};
  if (time_conditioned_) {
    if (times.size() != batch) {
      throw ShapeError("trajectory net: " + std::to_string(times.size()) + " flow times for batch " +
                       std::to_string(batch));
    }
    Tensor<T> sin_emb({batch, cfg_.embed_dim});
    for (std::size_t b = 0; b < batch; ++b) {
      const auto e = sinusoidal_embed(times[b], cfg_.embed_dim);
      for (std::size_t k = 0; k < e.size(); ++k) sin_emb[b * cfg_.embed_dim + k] = static_cast<T>(e[k]);
    }
    Var h = g.gelu(g.linear(g.constant(std::move(sin_emb)), g.param(params_[t1_w_]), g.param(params_[t1_b_])));
    temb = g.linear(h, g.param(params_[t2_w_]), g.param(params_[t2_b_]));
  } else if (!times.empty()) {
    throw Error("trajectory net: flow time given to a network without time conditioning");
  }

  Var x = g.linear(traj, g.param(params_[in_w_]), g.param(params_[in_b_]));
  if (keep) x = g.rowscale(x, g.constant(*keep));
  Var skip = run_block(g, enc_, x, e_obs, temb, 1);
  Var h = run_block(g, down_, skip, e_obs, temb, 2);
  h = run_block(g, mid_, h, e_obs, temb, 1);
  const Var parts[] = {g.upsample2(h), skip};
  h = run_block(g, up_, g.concat(parts, 2), e_obs, temb, 1);
  Var out = g.linear(h, g.param(params_[out_w_]), g.param(params_[out_b_]));
  nfe_->fetch_add(batch);
  return out;
}

template <typename T>
ParameterSet<T> strip_time_conditioning(const ParameterSet<T>& teacher) {
  ParameterSet<T> out;
  for (const auto& p : teacher) {
    if (!is_time_conditioning(p.name)) out.add(p.name, p.value);
  }
  return out;
}

template Tensor<float> draw_keep_mask<float>(std::span<const double>, Rng&);
template Tensor<double> draw_keep_mask<double>(std::span<const double>, Rng&);
template Var mask_noise_embedding<float>(Graph<float>&, Var, std::span<const double>, Rng&);
template Var mask_noise_embedding<double>(Graph<double>&, Var, std::span<const double>, Rng&);
template ParameterSet<float> strip_time_conditioning<float>(const ParameterSet<float>&);
template ParameterSet<double> strip_time_conditioning<double>(const ParameterSet<double>&);
template class TrajectoryNet<float>;
template class TrajectoryNet<double>;

}  // namespace fd
