#include "flowdistill/cfm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "flowdistill/adam.hpp"
#include "flowdistill/binary_io.hpp"

namespace fd {

void validate(const FlowSchedule& s) {
  if (!std::isfinite(s.mu)) throw Error("flow schedule: mu must be finite");
  if (!(s.sigma > 0.0) || !std::isfinite(s.sigma)) throw Error("flow schedule: sigma must be positive");
  if (!(s.eps > 0.0) || s.eps >= 1.0) throw Error("flow schedule: eps must lie in (0, 1)");
}

double sample_time(const FlowSchedule& s, Rng& rng) {
  const double x = s.mu + s.sigma * rng.normal();
  return 1.0 / (1.0 + std::exp(-x));
}

template <typename T>
Tensor<T> interpolate_path(const Tensor<T>& tau0, const Tensor<T>& tau1, double t) {
  if (tau0.shape() != tau1.shape()) {
    throw ShapeError("interpolate_path: " + shape_str(tau0.shape()) + " vs " + shape_str(tau1.shape()));
  }
  Tensor<T> out(tau0.shape());
  const T a = static_cast<T>(1.0 - t), b = static_cast<T>(t);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * tau0[i] + b * tau1[i];
  return out;
}

template <typename T>
Tensor<T> velocity_from_data_pred(const Tensor<T>& d_out, const Tensor<T>& tau_t, double t, double eps) {
  if (d_out.shape() != tau_t.shape()) {
    throw ShapeError("velocity: " + shape_str(d_out.shape()) + " vs " + shape_str(tau_t.shape()));
  }
  const T inv = static_cast<T>(1.0 / std::max(1.0 - t, eps));
  Tensor<T> v(d_out.shape());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (d_out[i] - tau_t[i]) * inv;
  return v;
}

template <typename T>
Var cfm_loss(Graph<T>& g, const DataPredictor<T>& predict, const Tensor<T>& tau1, Var e_obs, const FlowSchedule& s,
             Rng& rng, bool anti_shortcut) {
  if (tau1.rank() != 3) throw ShapeError("cfm_loss: expected (B, H, D), got " + shape_str(tau1.shape()));
  const std::size_t b = tau1.dim(0);
  const std::size_t per = tau1.size() / b;
  std::vector<double> times(b);
  Tensor<T> tau_t(tau1.shape());
  for (std::size_t i = 0; i < b; ++i) {
    times[i] = sample_time(s, rng);
    const T a = static_cast<T>(1.0 - times[i]), c = static_cast<T>(times[i]);
    for (std::size_t j = 0; j < per; ++j) {
      const std::size_t k = i * per + j;
      tau_t[k] = a * static_cast<T>(rng.normal()) + c * tau1[k];
    }
  }
  Tensor<T> keep;
  if (anti_shortcut) keep = draw_keep_mask<T>(times, rng);
  const Var pred = predict(g, g.constant(std::move(tau_t)), times, e_obs, anti_shortcut ? &keep : nullptr);
  return g.squared_error(pred, g.constant(tau1));
}

std::string integrator_name(Integrator i) { return i == Integrator::kHeun ? "heun" : "euler"; }

Integrator parse_integrator(const std::string& name) {
  if (name == "euler") return Integrator::kEuler;
  if (name == "heun") return Integrator::kHeun;
  throw Error("unknown integrator '" + name + "' (expected euler or heun)");
}

void validate(const OdeSamplerConfig& c) {
  if (c.steps == 0) throw Error("ode sampler: steps must be at least 1");
}

TensorPredictor make_predictor(TeacherNet<float>& teacher) {
  return [&teacher](const TensorF& tau, std::span<const double> times, const TensorF& e_obs) {
    Graph<float> g(false);
    const Var out = teacher.teacher_forward(g, g.constant(tau), times, g.constant(e_obs));
    return g.value(out);
  };
}

namespace {

void axpy(TensorF& x, float a, const TensorF& v) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += a * v[i];
}

}  // namespace

OdeTrace sample_ode(const TensorPredictor& predict, const TensorF& e_obs, const TensorF& tau0,
                    const OdeSamplerConfig& cfg, double eps) {
  validate(cfg);
  if (tau0.rank() != 3) throw ShapeError("sample_ode: expected (B, H, D), got " + shape_str(tau0.shape()));
  const std::size_t b = tau0.dim(0);
  const std::size_t n = cfg.steps;
  const double h = 1.0 / static_cast<double>(n);
  std::vector<double> times(b);
  auto at = [&](double t) {
    std::fill(times.begin(), times.end(), t);
    return std::span<const double>(times);
  };

  TensorF x = tau0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double t = static_cast<double>(i) * h;
    const TensorF v1 = velocity_from_data_pred(predict(x, at(t), e_obs), x, t, eps);
    if (cfg.integrator == Integrator::kEuler) {
      axpy(x, static_cast<float>(h), v1);
    } else {
      TensorF xp = x;
      axpy(xp, static_cast<float>(h), v1);
      const double t2 = static_cast<double>(i + 1) * h;
      const TensorF v2 = velocity_from_data_pred(predict(xp, at(t2), e_obs), xp, t2, eps);
      axpy(x, static_cast<float>(0.5 * h), v1);
      axpy(x, static_cast<float>(0.5 * h), v2);
    }
  }
  OdeTrace out;
  out.pre_jump = x;
  out.final = predict(x, at(static_cast<double>(n - 1) * h), e_obs);
  return out;
}

TensorF sample_ode(const TensorPredictor& predict, const TensorF& e_obs, Shape traj_shape, const OdeSamplerConfig& cfg,
                   Rng& rng, double eps) {
  return sample_ode(predict, e_obs, rng.normal_tensor<float>(std::move(traj_shape)), cfg, eps).final;
}

TensorF generate_teacher_set(TeacherNet<float>& teacher, std::span<const float> e_obs, std::size_t k,
                             const OdeSamplerConfig& cfg, std::uint64_t seed, double eps) {
  const NetConfig& nc = teacher.config();
  if (k == 0) throw Error("teacher set: K must be at least 1");
  if (e_obs.size() != nc.obs_dim) {
    throw ShapeError("teacher set: observation embedding has " + std::to_string(e_obs.size()) + " entries, expected " +
                     std::to_string(nc.obs_dim));
  }
  TensorF obs({k, nc.obs_dim});
  for (std::size_t i = 0; i < k; ++i) std::copy(e_obs.begin(), e_obs.end(), obs.ptr() + i * nc.obs_dim);
  const std::size_t per = nc.horizon * nc.action_dim;
  TensorF tau0({k, nc.horizon, nc.action_dim});
  for (std::size_t i = 0; i < k; ++i) {
    Rng rng(derive_seed(seed, i));
    for (std::size_t j = 0; j < per; ++j) tau0[i * per + j] = static_cast<float>(rng.normal());
  }
  TensorF out = sample_ode(make_predictor(teacher), obs, tau0, cfg, eps).final;
  const float scale = static_cast<float>(nc.action_scale);
  for (auto& v : out.data()) v *= scale;
  return out;
}

void write_loss_csv(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f.precision(9);
  f << "epoch,loss\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) f << e << ',' << log.epoch_loss[e] << '\n';
  if (!f) throw Error("failed writing " + path.string());
}

TrainLog train_teacher(std::span<const Demo> demos, Encoder<float>& encoder, TeacherNet<float>& teacher,
                       const TeacherTrainConfig& cfg) {
  validate(cfg.schedule);
  if (cfg.batch == 0) throw Error("teacher training: batch must be positive");
  if (!(cfg.lr > 0.0) || cfg.lr_final < 0.0) throw Error("teacher training: learning rates must be positive");
  if (cfg.geometry_corruption < 0.0 || cfg.geometry_corruption > 1.0) {
    throw Error("teacher training: geometry_corruption must lie in [0, 1]");
  }
  TrainLog log;
  if (cfg.epochs == 0) {
    if (!cfg.log_csv.empty()) write_loss_csv(cfg.log_csv, log);
    return log;
  }
  if (demos.empty()) throw Error("teacher training: no demonstrations");

  const NetConfig& nc = teacher.config();
  for (const Demo& d : demos) {
    if (d.traj.shape() != Shape{nc.horizon, nc.action_dim}) {
      throw ShapeError("teacher training: demo trajectory " + shape_str(d.traj.shape()) + " does not match the net");
    }
  }
  const std::size_t n = demos.size();
  const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  const float inv_scale = static_cast<float>(1.0 / nc.action_scale);
  const std::size_t per = nc.horizon * nc.action_dim;

  Adam<float> opt(AdamConfig{cfg.lr});
  ParameterSet<float>* sets[] = {&encoder.params(), &teacher.params()};
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const DataPredictor<float> predict = [&teacher](Graph<float>& g, Var tau, std::span<const double> times, Var e,
                                                  const TensorF* keep) {
    return teacher.teacher_forward(g, tau, times, e, keep);
  };

  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double acc = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::size_t lo = s * cfg.batch, hi = std::min(n, lo + cfg.batch);
      std::vector<const RawObservation*> obs;
      TensorF tau1({hi - lo, nc.horizon, nc.action_dim});
      for (std::size_t i = lo; i < hi; ++i) {
        const Demo& d = demos[order[i]];
        obs.push_back(&d.obs);
        for (std::size_t j = 0; j < per; ++j) tau1[(i - lo) * per + j] = d.traj[j] * inv_scale;
      }
      ObsBatch<float> batch = stack_observations<float>(encoder.config(), obs);
      const std::size_t geo = batch.geometry.size() / (hi - lo);
      for (std::size_t b = 0; b < hi - lo; ++b) {
        if (!rng.bernoulli(cfg.geometry_corruption)) continue;
        for (std::size_t j = 0; j < geo; ++j) {
          batch.geometry[b * geo + j] += static_cast<float>(cfg.corruption_std * rng.normal());
        }
      }

      const double progress = total > 1 ? static_cast<double>(step) / static_cast<double>(total - 1) : 0.0;
      opt.set_lr(cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress)));

      double loss_value = 0.0;
      try {
        Graph<float> g;
        const auto enc = encoder.assemble(g, batch);
        const Var loss = cfm_loss<float>(g, predict, tau1, enc.e_obs, cfg.schedule, rng, cfg.anti_shortcut);
        loss_value = g.value(loss)[0];
        if (!std::isfinite(loss_value)) throw NonFiniteError("loss is not finite");
        for (ParameterSet<float>* p : sets) p->zero_grad();
        g.backward(loss);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("teacher training diverged at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(s) + ": " + e.what());
      }
      opt.step(sets);
      log.step_loss.push_back(loss_value);
      acc += loss_value;
    }
    const double epoch_loss = acc / static_cast<double>(steps_per_epoch);
    log.epoch_loss.push_back(epoch_loss);
    log.epochs_run = epoch + 1;
    if (cfg.patience > 0) {
      if (epoch_loss < best - cfg.min_delta) {
        best = epoch_loss;
        stale = 0;
      } else if (++stale >= cfg.patience) {
        log.stopped_early = true;
        break;
      }
    }
  }
  if (!cfg.log_csv.empty()) write_loss_csv(cfg.log_csv, log);
  return log;
}

std::vector<std::uint8_t> encode_tset(const TensorF& set) {
  if (set.rank() != 3) throw ShapeError("TSET: expected (K, H, D), got " + shape_str(set.shape()));
  ByteWriter w;
  w.bytes("TSET");
  w.u32(1);
  for (std::size_t a = 0; a < 3; ++a) w.u32(static_cast<std::uint32_t>(set.dim(a)));
  for (float v : set.data()) w.f32(v);
  return w.buffer();
}

TensorF decode_tset(std::vector<std::uint8_t> bytes, const std::string& what) {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("TSET");
  const std::uint32_t version = r.u32();
  if (version != 1) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::size_t k = r.u32(), h = r.u32(), d = r.u32();
  if (k == 0 || h == 0 || d == 0) throw FormatError(what + ": empty dimensions");
  if (r.remaining() != k * h * d * 4) throw FormatError(what + ": payload size does not match the header");
  TensorF out({k, h, d});
  for (auto& v : out.data()) v = r.f32();
  r.expect_end();
  return out;
}

void write_tset(const std::filesystem::path& path, const TensorF& set) {
  ByteWriter w;
  const auto bytes = encode_tset(set);
  w.bytes(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  w.write_file(path);
}

TensorF read_tset(const std::filesystem::path& path) { return decode_tset(read_file_bytes(path), path.string()); }

void export_tset_csv(const std::filesystem::path& path, const TensorF& set) {
  if (set.rank() != 3) throw ShapeError("TSET: expected (K, H, D), got " + shape_str(set.shape()));
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f.precision(9);
  const std::size_t k = set.dim(0), h = set.dim(1), d = set.dim(2);
  f << "k,h";
  for (std::size_t j = 0; j < d; ++j) f << ",a_" << j;
  f << '\n';
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t t = 0; t < h; ++t) {
      f << i << ',' << t;
      for (std::size_t j = 0; j < d; ++j) f << ',' << set[(i * h + t) * d + j];
      f << '\n';
    }
  }
  if (!f) throw Error("failed writing " + path.string());
}

template Tensor<float> interpolate_path<float>(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> interpolate_path<double>(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> velocity_from_data_pred<float>(const Tensor<float>&, const Tensor<float>&, double, double);
template Tensor<double> velocity_from_data_pred<double>(const Tensor<double>&, const Tensor<double>&, double, double);
template Var cfm_loss<float>(Graph<float>&, const DataPredictor<float>&, const Tensor<float>&, Var,
                             const FlowSchedule&, Rng&, bool);
template Var cfm_loss<double>(Graph<double>&, const DataPredictor<double>&, const Tensor<double>&, Var,
                              const FlowSchedule&, Rng&, bool);

}  // namespace fd
