#include "flowdistill/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "flowdistill/distill.hpp"

namespace fd {

namespace {

std::size_t row_size(const TensorF& t) { return t.size() / t.dim(0); }

std::span<const float> row(const TensorF& t, std::size_t i) {
  const std::size_t m = row_size(t);
  return {t.ptr() + i * m, m};
}

void need_set(const TensorF& t, const char* who) {
  if (t.rank() < 2 || t.dim(0) == 0 || t.empty()) throw ShapeError(std::string(who) + ": expected a nonempty set");
}

// Nearest-rank percentile of an unsorted sample.
double percentile(std::vector<double> v, double p) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double rank = std::ceil(p * static_cast<double>(v.size()));
  const std::size_t idx = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(v.size()))) - 1;
  return v[idx];
}

}  // namespace

double traj_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("traj_distance: lengths differ");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

std::span<const float> ModeReference::member(std::size_t mode, std::size_t i) const {
  return row(pool, mode * per_mode + i);
}

std::span<const float> ModeReference::centroid(std::size_t mode) const { return row(centroids, mode); }

ModeReference build_mode_reference(const TaskSpec& task, const Scene& scene, const EpisodeState& state,
                                   std::size_t per_mode, std::uint64_t seed, double percentile_level) {
  if (per_mode == 0) throw Error("mode reference: per_mode must be positive");
  ModeReference ref;
  ref.modes = task.modes;
  ref.per_mode = per_mode;
  const std::size_t h = task.horizon, m = h * 2;
  ref.pool = TensorF({task.modes * per_mode, h, 2});
  ref.centroids = TensorF({task.modes, h, 2});
  Rng rng(seed);
  for (std::size_t mode = 0; mode < task.modes; ++mode) {
    std::vector<double> acc(m, 0.0);
    for (std::size_t i = 0; i < per_mode; ++i) {
      const TensorF t = expert_trajectory(task, scene, state, mode, rng);
      std::copy(t.vec().begin(), t.vec().end(), ref.pool.ptr() + (mode * per_mode + i) * m);
      for (std::size_t j = 0; j < m; ++j) acc[j] += t[j];
    }
    for (std::size_t j = 0; j < m; ++j) ref.centroids[mode * m + j] = static_cast<float>(acc[j] / per_mode);
  }
  std::vector<double> d;
  d.reserve(task.modes * per_mode);
  for (std::size_t mode = 0; mode < task.modes; ++mode) {
    for (std::size_t i = 0; i < per_mode; ++i) d.push_back(traj_distance(ref.member(mode, i), ref.centroid(mode)));
  }
  ref.delta = percentile(std::move(d), percentile_level);
  return ref;
}

std::vector<std::size_t> classify_modes(const TensorF& set, const ModeReference& ref) {
  need_set(set, "classify_modes");
  if (row_size(set) != row_size(ref.centroids)) throw ShapeError("classify_modes: trajectory shape mismatch");
  return nearest_members(set, ref.centroids);
}

double mode_coverage(const TensorF& set, const ModeReference& ref) {
  const auto label = classify_modes(set, ref);
  std::vector<double> best(ref.modes, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < label.size(); ++i) {
    best[label[i]] = std::min(best[label[i]], traj_distance(row(set, i), ref.centroid(label[i])));
  }
  std::size_t hit = 0;
  for (double b : best) hit += b <= ref.delta;
  return static_cast<double>(hit) / static_cast<double>(ref.modes);
}

double mode_fidelity(const TensorF& set, const TensorF& pool, double delta) {
  need_set(set, "mode_fidelity");
  need_set(pool, "mode_fidelity");
  if (row_size(set) != row_size(pool)) throw ShapeError("mode_fidelity: trajectory shape mismatch");
  const auto nearest = nearest_members(set, pool);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < nearest.size(); ++i) ok += traj_distance(row(set, i), row(pool, nearest[i])) <= delta;
  return static_cast<double>(ok) / static_cast<double>(set.dim(0));
}

double collapse_score(const TensorF& set) {
  need_set(set, "collapse_score");
  const std::size_t k = set.dim(0);
  if (k < 2) throw Error("collapse_score: need at least 2 trajectories, got " + std::to_string(k));
  double s = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) s += traj_distance(row(set, i), row(set, j));
  }
  return s / static_cast<double>(k * (k - 1) / 2);
}

ConfidenceInterval bootstrap_mean_ci(std::span<const double> values, std::size_t resamples, std::uint64_t seed,
                                     double level) {
  ConfidenceInterval ci;
  if (values.empty()) return ci;
  const std::size_t n = values.size();
  double sum = 0;
  for (double v : values) sum += v;
  ci.mean = sum / static_cast<double>(n);
  if (resamples == 0) {
    ci.lo = ci.hi = ci.mean;
    return ci;
  }
  Rng rng(seed);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += values[rng.index(n)];
    m = s / static_cast<double>(n);
  }
  const double tail = 0.5 * (1.0 - level);
  ci.lo = percentile(means, tail);
  ci.hi = percentile(std::move(means), 1.0 - tail);
  return ci;
}

InferenceStats measure_inference(Policy& policy, std::span<const float> e_obs, std::size_t repeats,
                                 std::size_t warmup) {
  if (repeats == 0) throw Error("measure_inference: repeats must be positive");
  for (std::size_t i = 0; i < warmup; ++i) policy.sample(e_obs, 1, i);
  std::vector<double> ms(repeats);
  const std::uint64_t nfe0 = policy.nfe();
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    policy.sample(e_obs, 1, 1000 + i);
    const auto t1 = std::chrono::steady_clock::now();
    ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  InferenceStats s;
  s.repeats = repeats;
  s.nfe_per_chunk = static_cast<double>(policy.nfe() - nfe0) / static_cast<double>(repeats);
  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  s.median_ms = repeats % 2 ? sorted[repeats / 2] : 0.5 * (sorted[repeats / 2 - 1] + sorted[repeats / 2]);
  s.p10_ms = percentile(sorted, 0.10);
  s.p90_ms = percentile(sorted, 0.90);
  s.hz = s.median_ms > 0 ? 1000.0 / s.median_ms : std::numeric_limits<double>::infinity();
  return s;
}

void EvalReport::aggregate(std::size_t resamples, std::uint64_t seed) {
  auto column = [&](double ObsMetrics::*field) {
    std::vector<double> v;
    v.reserve(rows.size());
    for (const auto& r : rows) v.push_back(r.*field);
    return v;
  };
  coverage = bootstrap_mean_ci(column(&ObsMetrics::coverage), resamples, seed);
  fidelity = bootstrap_mean_ci(column(&ObsMetrics::fidelity), resamples, seed + 1);
  collapse = bootstrap_mean_ci(column(&ObsMetrics::collapse), resamples, seed + 2);
  collapse_norm = bootstrap_mean_ci(column(&ObsMetrics::collapse_norm), resamples, seed + 3);
  chamfer_to_expert = bootstrap_mean_ci(column(&ObsMetrics::chamfer_to_expert), resamples, seed + 4);
  std::size_t full = 0;
  for (const auto& r : rows) full += r.coverage >= 1.0;
  full_coverage_rate = rows.empty() ? 0.0 : static_cast<double>(full) / static_cast<double>(rows.size());
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f.precision(9);
  f << "obs_id,policy,coverage,fidelity,collapse,collapse_norm,chamfer_to_expert,delta\n";
  for (const auto& r : report.rows) {
    f << r.obs_id << ',' << report.policy << ',' << r.coverage << ',' << r.fidelity << ',' << r.collapse << ','
      << r.collapse_norm << ',' << r.chamfer_to_expert << ',' << r.delta << '\n';
  }
  if (!f) throw Error("failed writing " + path.string());
}

void write_report_json(const std::filesystem::path& path, const EvalReport& report) {
  auto ci = [](const ConfidenceInterval& c) { return nlohmann::ordered_json{{"mean", c.mean}, {"lo", c.lo}, {"hi", c.hi}}; };
  nlohmann::ordered_json j;
  j["policy"] = report.policy;
  j["observations"] = report.rows.size();
  j["coverage"] = ci(report.coverage);
  j["fidelity"] = ci(report.fidelity);
  j["collapse"] = ci(report.collapse);
  j["collapse_norm"] = ci(report.collapse_norm);
  j["chamfer_to_expert"] = ci(report.chamfer_to_expert);
  j["full_coverage_rate"] = report.full_coverage_rate;
  if (report.has_timing) {
    const auto& t = report.timing;
    j["timing"] = {{"median_ms", t.median_ms}, {"p10_ms", t.p10_ms},   {"p90_ms", t.p90_ms},
                   {"nfe_per_chunk", t.nfe_per_chunk}, {"hz", t.hz}, {"repeats", t.repeats}};
  }
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

}  // namespace fd
