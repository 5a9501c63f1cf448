#include "flowdistill/distill.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>

#include "flowdistill/adam.hpp"
#include "flowdistill/binary_io.hpp"

namespace fd {

namespace {

template <typename T>
void check_sets(const Tensor<T>& a, const Tensor<T>& b, std::size_t groups, const char* who) {
  if (groups == 0) throw Error(std::string(who) + ": groups must be positive");
  if (a.rank() == 0 || b.rank() == 0 || a.empty() || b.empty()) throw Error(std::string(who) + ": empty set");
  Shape sa(a.shape().begin() + 1, a.shape().end()), sb(b.shape().begin() + 1, b.shape().end());
  if (sa != sb) {
    throw ShapeError(std::string(who) + ": member shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  if (a.dim(0) % groups != 0 || b.dim(0) % groups != 0 || a.dim(0) < groups || b.dim(0) < groups) {
    throw ShapeError(std::string(who) + ": set sizes do not split into " + std::to_string(groups) + " groups");
  }
}

template <typename T>
double sqdist(const T* x, const T* y, std::size_t m) {
  double s = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(y[i]);
    s += d * d;
  }
  return s;
}

// Per group: argmin over B for every row of A, and over A for every row of B.
struct Assignment {
  std::vector<std::size_t> a_to_b, b_to_a;
  double value = 0;
};

template <typename T>
Assignment assign(const Tensor<T>& a, const Tensor<T>& b, std::size_t groups) {
  const std::size_t ka = a.dim(0) / groups, kb = b.dim(0) / groups;
  const std::size_t m = a.size() / a.dim(0);
  Assignment out;
  out.a_to_b.assign(a.dim(0), 0);
  out.b_to_a.assign(b.dim(0), 0);
  std::vector<double> d(ka * kb), mins;
  // Minima are summed in sorted order so the value does not depend on member order.
  auto sorted_sum = [&mins] {
    std::sort(mins.begin(), mins.end());
    double s = 0;
    for (double v : mins) s += v;
    mins.clear();
    return s;
  };
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (std::size_t i = 0; i < ka; ++i) {
      for (std::size_t j = 0; j < kb; ++j) {
        d[i * kb + j] = sqdist(a.ptr() + (gi * ka + i) * m, b.ptr() + (gi * kb + j) * m, m);
      }
    }
    for (std::size_t i = 0; i < ka; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < kb; ++j) {
        if (d[i * kb + j] < d[i * kb + best]) best = j;
      }
      out.a_to_b[gi * ka + i] = gi * kb + best;
      mins.push_back(d[i * kb + best]);
    }
    const double s1 = sorted_sum();
    for (std::size_t j = 0; j < kb; ++j) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < ka; ++i) {
        if (d[i * kb + j] < d[best * kb + j]) best = i;
      }
      out.b_to_a[gi * kb + j] = gi * ka + best;
      mins.push_back(d[best * kb + j]);
    }
    const double s2 = sorted_sum();
    out.value += s1 / static_cast<double>(ka) + s2 / static_cast<double>(kb);
  }
  out.value /= static_cast<double>(groups);
  return out;
}

}  // namespace

template <typename T>
double chamfer_distance(const Tensor<T>& a, const Tensor<T>& b) {
  check_sets(a, b, 1, "chamfer");
  return assign(a, b, 1).value;
}

template <typename T>
std::vector<std::size_t> nearest_members(const Tensor<T>& from, const Tensor<T>& to) {
  check_sets(from, to, 1, "nearest_members");
  return assign(from, to, 1).a_to_b;
}

template <typename T>
Var chamfer(Graph<T>& g, Var a, Var b, std::size_t groups) {
  const Tensor<T>& av = g.value(a);
  const Tensor<T>& bv = g.value(b);
  check_sets(av, bv, groups, "chamfer");
  Assignment asg = assign(av, bv, groups);
  const std::size_t m = av.size() / av.dim(0);
  const double w1 = 2.0 / static_cast<double>((av.dim(0) / groups) * groups);
  const double w2 = 2.0 / static_cast<double>((bv.dim(0) / groups) * groups);
  // Differences are recomputed in backward from copies of the inputs.
  const Var in[] = {a, b};
  return g.custom(Tensor<T>::scalar(static_cast<T>(asg.value)), in,
                  [av, bv, asg = std::move(asg), m, w1, w2](const Tensor<T>& go, std::span<Tensor<T>* const> gi) {
                    const double s = static_cast<double>(go[0]);
                    auto pair = [&](std::size_t i, std::size_t j, double w) {
                      for (std::size_t c = 0; c < m; ++c) {
                        const double d = s * w * (static_cast<double>(av[i * m + c]) - bv[j * m + c]);
                        if (gi[0]) (*gi[0])[i * m + c] += static_cast<T>(d);
                        if (gi[1]) (*gi[1])[j * m + c] -= static_cast<T>(d);
                      }
                    };
                    for (std::size_t i = 0; i < asg.a_to_b.size(); ++i) pair(i, asg.a_to_b[i], w1);
                    for (std::size_t j = 0; j < asg.b_to_a.size(); ++j) pair(asg.b_to_a[j], j, w2);
                  });
}

DistillDataset DistillDataset::truncated(std::size_t k) const {
  if (k == 0 || k > meta.k) {
    throw Error("distill dataset: cannot truncate K=" + std::to_string(meta.k) + " to " + std::to_string(k));
  }
  DistillDataset out;
  out.meta = meta;
  out.meta.k = k;
  out.e_obs = e_obs;
  const std::size_t per = meta.horizon * meta.action_dim;
  for (const TensorF& s : sets) {
    AlignedVector<float> v(s.vec().begin(), s.vec().begin() + static_cast<std::ptrdiff_t>(k * per));
    out.sets.emplace_back(Shape{k, meta.horizon, meta.action_dim}, std::move(v));
  }
  return out;
}

void validate(const DistillDataset& ds) {
  const DistillMeta& m = ds.meta;
  if (m.k == 0) throw Error("distill dataset: K must be at least 1");
  if (ds.sets.size() != ds.e_obs.size()) throw Error("distill dataset: set and embedding counts differ");
  for (std::size_t i = 0; i < ds.sets.size(); ++i) {
    if (ds.sets[i].shape() != Shape{m.k, m.horizon, m.action_dim}) {
      throw ShapeError("distill dataset: set " + std::to_string(i) + " has shape " + shape_str(ds.sets[i].shape()));
    }
    if (ds.e_obs[i].shape() != Shape{m.obs_dim}) {
      throw ShapeError("distill dataset: embedding " + std::to_string(i) + " has shape " +
                       shape_str(ds.e_obs[i].shape()));
    }
  }
}

DistillDataset build_distill_dataset(TeacherNet<float>& teacher, Encoder<float>& encoder,
                                     std::span<const RawObservation* const> observations, std::size_t k,
                                     const OdeSamplerConfig& sampler, std::uint64_t seed, std::string teacher_hash) {
  if (k == 0) throw Error("distill dataset: K must be at least 1");
  validate(sampler);
  const NetConfig& nc = teacher.config();
  DistillDataset ds;
  ds.meta = {k, nc.horizon, nc.action_dim, nc.obs_dim, seed, std::move(teacher_hash), sampler};
  constexpr std::size_t kChunk = 64;
  for (std::size_t lo = 0; lo < observations.size(); lo += kChunk) {
    const std::size_t hi = std::min(observations.size(), lo + kChunk);
    const TensorF e = encode_observations(encoder, observations.subspan(lo, hi - lo));
    for (std::size_t i = lo; i < hi; ++i) {
      const float* row = e.ptr() + (i - lo) * nc.obs_dim;
      ds.e_obs.emplace_back(Shape{nc.obs_dim}, AlignedVector<float>(row, row + nc.obs_dim));
      ds.sets.push_back(generate_teacher_set(teacher, {row, nc.obs_dim}, k, sampler, derive_seed(seed, i)));
    }
  }
  return ds;
}

std::vector<std::uint8_t> encode_eobs(const TensorF& e) {
  if (e.rank() != 1) throw ShapeError("EOBS: expected a vector, got " + shape_str(e.shape()));
  ByteWriter w;
  w.bytes("EOBS");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(e.size()));
  for (float v : e.data()) w.f32(v);
  return w.buffer();
}

TensorF decode_eobs(std::vector<std::uint8_t> bytes, const std::string& what) {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("EOBS");
  const std::uint32_t version = r.u32();
  if (version != 1) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::size_t n = r.u32();
  if (r.remaining() != n * 4) throw FormatError(what + ": payload size does not match the header");
  TensorF out({n});
  for (auto& v : out.data()) v = r.f32();
  r.expect_end();
  return out;
}

namespace {

std::string item_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "obs_%05zu", i);
  return buf;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot write " + p.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + p.string());
}

}  // namespace

void save_distill_dataset(const std::filesystem::path& dir, const DistillDataset& ds) {
  validate(ds);
  std::filesystem::create_directories(dir);
  const DistillMeta& m = ds.meta;
  nlohmann::ordered_json j;
  j["format"] = "flowdistill-distill";
  j["version"] = 1;
  j["count"] = ds.size();
  j["k"] = m.k;
  j["horizon"] = m.horizon;
  j["action_dim"] = m.action_dim;
  j["obs_dim"] = m.obs_dim;
  j["seed"] = m.seed;
  j["teacher_hash"] = m.teacher_hash;
  j["sampler"] = {{"integrator", integrator_name(m.sampler.integrator)}, {"steps", m.sampler.steps}};
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_bytes(dir / (item_stem(i) + ".tset"), encode_tset(ds.sets[i]));
    write_bytes(dir / (item_stem(i) + ".eobs"), encode_eobs(ds.e_obs[i]));
  }
  std::ofstream f(dir / "meta.json");
  if (!f) throw Error("cannot write " + (dir / "meta.json").string());
  f << j.dump(2) << '\n';
}

DistillDataset load_distill_dataset(const std::filesystem::path& dir, const std::string& expected_hash) {
  const auto meta_path = dir / "meta.json";
  std::ifstream f(meta_path);
  if (!f) throw Error("distill dataset: missing " + meta_path.string());
  DistillDataset ds;
  std::size_t count = 0;
  try {
    const auto j = nlohmann::json::parse(f);
    if (j.at("format") != "flowdistill-distill" || j.at("version") != 1) throw FormatError("unsupported format");
    count = j.at("count");
    ds.meta.k = j.at("k");
    ds.meta.horizon = j.at("horizon");
    ds.meta.action_dim = j.at("action_dim");
    ds.meta.obs_dim = j.at("obs_dim");
    ds.meta.seed = j.at("seed");
    ds.meta.teacher_hash = j.at("teacher_hash");
    ds.meta.sampler.integrator = parse_integrator(j.at("sampler").at("integrator"));
    ds.meta.sampler.steps = j.at("sampler").at("steps");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(meta_path.string() + ": " + e.what());
  }
  if (!expected_hash.empty() && ds.meta.teacher_hash != expected_hash) {
    throw Error("distill dataset: teacher hash " + ds.meta.teacher_hash + " does not match checkpoint " +
                expected_hash);
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto t = dir / (item_stem(i) + ".tset");
    const auto e = dir / (item_stem(i) + ".eobs");
    ds.sets.push_back(decode_tset(read_file_bytes(t), t.string()));
    ds.e_obs.push_back(decode_eobs(read_file_bytes(e), e.string()));
  }
  validate(ds);
  return ds;
}

TrainLog imle_train_student(const DistillDataset& ds, StudentNet<float>& student, const StudentTrainConfig& cfg) {
  validate(ds);
  if (cfg.batch == 0) throw Error("student training: batch must be positive");
  if (!(cfg.lr > 0.0) || cfg.lr_final < 0.0) throw Error("student training: learning rates must be positive");
  const NetConfig& nc = student.config();
  if (nc.horizon != ds.meta.horizon || nc.action_dim != ds.meta.action_dim || nc.obs_dim != ds.meta.obs_dim) {
    throw ShapeError("student training: network does not match the dataset");
  }
  TrainLog log;
  if (cfg.epochs == 0 || ds.size() == 0) {
    if (!cfg.log_csv.empty()) write_loss_csv(cfg.log_csv, log);
    return log;
  }
  const std::size_t n = ds.size(), k = ds.meta.k;
  const std::size_t per = nc.horizon * nc.action_dim;
  const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  const float inv_scale = static_cast<float>(1.0 / nc.action_scale);

  Adam<float> opt(AdamConfig{cfg.lr});
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0, step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    double acc = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const std::size_t lo = s * cfg.batch, hi = std::min(n, lo + cfg.batch);
      const std::size_t b = hi - lo;
      TensorF target({b * k, nc.horizon, nc.action_dim});
      TensorF obs({b * k, nc.obs_dim});
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t item = order[lo + i];
        const TensorF& set = ds.sets[item];
        for (std::size_t j = 0; j < k * per; ++j) target[i * k * per + j] = set[j] * inv_scale;
        for (std::size_t r = 0; r < k; ++r) {
          std::copy(ds.e_obs[item].vec().begin(), ds.e_obs[item].vec().end(), obs.ptr() + (i * k + r) * nc.obs_dim);
        }
      }
      TensorF z = rng.normal_tensor<float>({b * k, nc.horizon, nc.action_dim});

      const double progress = total > 1 ? static_cast<double>(step) / static_cast<double>(total - 1) : 0.0;
      opt.set_lr(cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress)));
      double loss_value = 0.0;
      try {
        Graph<float> g;
        const Var out = student.student_forward(g, g.constant(std::move(z)), g.constant(std::move(obs)));
        const Var loss = chamfer(g, g.constant(std::move(target)), out, b);
        loss_value = g.value(loss)[0];
        student.params().zero_grad();
        g.backward(loss);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("student training diverged at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(s) + ": " + e.what());
      }
      opt.step(student.params());
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

TensorF student_sample_set(StudentNet<float>& student, std::span<const float> e_obs, std::size_t k,
                           std::uint64_t seed) {
  const NetConfig& nc = student.config();
  if (k == 0) throw Error("student set: K must be at least 1");
  if (e_obs.size() != nc.obs_dim) throw ShapeError("student set: embedding size does not match the net");
  const std::size_t per = nc.horizon * nc.action_dim;
  TensorF z({k, nc.horizon, nc.action_dim});
  TensorF obs({k, nc.obs_dim});
  for (std::size_t i = 0; i < k; ++i) {
    Rng rng(derive_seed(seed, i));
    for (std::size_t j = 0; j < per; ++j) z[i * per + j] = static_cast<float>(rng.normal());
    std::copy(e_obs.begin(), e_obs.end(), obs.ptr() + i * nc.obs_dim);
  }
  Graph<float> g(false);
  TensorF out = g.value(student.student_forward(g, g.constant(std::move(z)), g.constant(std::move(obs))));
  const float scale = static_cast<float>(nc.action_scale);
  for (auto& v : out.data()) v *= scale;
  return out;
}

template double chamfer_distance<float>(const Tensor<float>&, const Tensor<float>&);
template double chamfer_distance<double>(const Tensor<double>&, const Tensor<double>&);
template Var chamfer<float>(Graph<float>&, Var, Var, std::size_t);
template Var chamfer<double>(Graph<double>&, Var, Var, std::size_t);
template std::vector<std::size_t> nearest_members<float>(const Tensor<float>&, const Tensor<float>&);
template std::vector<std::size_t> nearest_members<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace fd
