#include "flowdistill/tasks.hpp"

#include <algorithm>
#include <numbers>

namespace fd {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kMarkerRadius = 0.03;
constexpr double kBlobSigma = 0.1;

double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

Vec2 clip_norm(Vec2 v, double cap) {
  const double n = v.norm();
  return n > cap ? v * (cap / n) : v;
}

double segment_distance(Vec2 c, Vec2 p, Vec2 q) {
  const Vec2 d = q - p;
  const double len2 = dot(d, d);
  const double u = len2 > 0 ? std::clamp(dot(c - p, d) / len2, 0.0, 1.0) : 0.0;
  return (p + d * u - c).norm();
}

// Uniform jitter in a square of half-width j.
Vec2 jitter(Rng& rng, double j) { return {rng.uniform(-j, j), rng.uniform(-j, j)}; }

std::vector<Vec2> fork_path(const TaskSpec& task, const Scene& scene, Vec2 from, std::size_t mode, Rng& rng) {
  const Vec2 goal = scene.goals.at(0);
  const Vec2 axis = goal - from;
  const double len = axis.norm();
  const Vec2 n{-axis.y / len, axis.x / len};
  const double sign = mode == 0 ? 1.0 : -1.0;

  // Lateral clearance needed where the obstacle projects onto the axis.
  const Vec2 rel = scene.obstacle - from;
  const double u_c = dot(rel, axis) / (len * len);
  const double d_c = dot(rel, n) * sign;
  double base = 0.0;
  if (u_c > 0.0 && u_c < 1.0) {
    const double need = d_c + scene.obstacle_radius + task.detour_clearance;
    base = std::max(0.0, need) / std::sin(kPi * std::clamp(u_c, 0.2, 0.8));
  }

  const std::size_t h = task.horizon;
  std::vector<Vec2> path(h + 1);
  for (int attempt = 0;; ++attempt) {
    // After many rejected draws fall back to the noiseless arc, which clears by construction.
    const double a = base + (attempt < 100 ? rng.normal(0.0, task.noise) : 0.0);
    const double b = attempt < 100 ? rng.normal(0.0, task.noise) : 0.0;
    for (std::size_t k = 0; k <= h; ++k) {
      const double u = static_cast<double>(k) / static_cast<double>(h);
      const double lateral = sign * a * std::sin(kPi * u) + b * std::sin(2.0 * kPi * u);
      path[k] = from + axis * u + n * lateral;
    }
    path[h] = goal;
    bool ok = true;
    for (std::size_t k = 0; k < h && ok; ++k) ok = !collides(scene, path[k], path[k + 1]);
    if (ok || attempt >= 100) return path;
  }
}

std::vector<Vec2> multigoal_path(const TaskSpec& task, const Scene& scene, Vec2 from, std::size_t mode, Rng& rng) {
  const Vec2 goal = scene.goals.at(mode);
  const Vec2 axis = goal - from;
  const double len = std::max(axis.norm(), 1e-9);
  const Vec2 n{-axis.y / len, axis.x / len};
  const double bend = rng.normal(0.0, task.noise);
  const std::size_t h = task.horizon;
  std::vector<Vec2> path(h + 1);
  for (std::size_t k = 0; k <= h; ++k) {
    const double u = static_cast<double>(k) / static_cast<double>(h);
    const double s = u * u * (3.0 - 2.0 * u);
    path[k] = from + axis * s + n * (bend * std::sin(kPi * u));
  }
  path[h] = goal;
  return path;
}

std::vector<Vec2> pursuit_path(const TaskSpec& task, Vec2 from, Vec2 target) {
  std::vector<Vec2> path(task.horizon + 1);
  path[0] = from;
  for (std::size_t k = 0; k < task.horizon; ++k) {
    path[k + 1] = path[k] + clip_norm((target - path[k]) * task.pursuit_gain, task.pursuit_cap);
  }
  return path;
}

}  // namespace

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kFork2d: return "fork2d";
    case TaskKind::kMultigoal: return "multigoal";
    case TaskKind::kDynamicTarget: return "dynamic-target";
  }
  return "unknown";
}

TaskKind parse_task(const std::string& name) {
  if (name == "fork2d") return TaskKind::kFork2d;
  if (name == "multigoal") return TaskKind::kMultigoal;
  if (name == "dynamic-target") return TaskKind::kDynamicTarget;
  throw Error("unknown task '" + name + "' (expected fork2d, multigoal or dynamic-target)");
}

TaskSpec default_task(TaskKind kind) {
  TaskSpec t;
  t.kind = kind;
  if (kind == TaskKind::kMultigoal) t.modes = 3;
  if (kind == TaskKind::kDynamicTarget) t.modes = 1;
  return t;
}

void validate(const TaskSpec& task) {
  if (task.horizon == 0) throw Error("task: horizon must be positive");
  if (task.kind != TaskKind::kDynamicTarget && task.modes < 2) {
    throw Error("task: " + task_name(task.kind) + " needs at least 2 modes");
  }
  if (task.kind == TaskKind::kFork2d && task.modes != 2) throw Error("task: fork2d has exactly 2 modes");
  if (task.kind == TaskKind::kDynamicTarget && task.modes != 1) throw Error("task: dynamic-target has 1 mode");
  if (task.noise < 0 || task.success_radius <= 0 || task.action_bound <= 0) {
    throw Error("task: noise must be >= 0, success radius and action bound > 0");
  }
  if (task.kind == TaskKind::kFork2d && task.obstacle_radius + task.scene_jitter >= 0.5) {
    throw Error("task: obstacle must lie strictly inside the workspace");
  }
  if (task.target_speed < 0) throw Error("task: target speed must be >= 0");
  if (task.start_fraction < 0 || task.start_fraction > 1) throw Error("task: start_fraction must lie in [0,1]");
}

Scene sample_scene(const TaskSpec& task, Rng& rng) {
  Scene s;
  const double j = task.scene_jitter;
  switch (task.kind) {
    case TaskKind::kFork2d:
      s.start = Vec2{-0.7, 0.0} + jitter(rng, j);
      s.goals = {Vec2{0.7, 0.0} + jitter(rng, j)};
      s.obstacle = jitter(rng, j);
      s.obstacle_radius = task.obstacle_radius + rng.uniform(-0.5 * j, 0.5 * j);
      break;
    case TaskKind::kMultigoal: {
      s.start = Vec2{-0.6, 0.0} + jitter(rng, j);
      const double m = static_cast<double>(task.modes);
      for (std::size_t i = 0; i < task.modes; ++i) {
        const double theta = (static_cast<double>(i) - 0.5 * (m - 1.0)) * (1.2 / std::max(1.0, m - 1.0)) +
                             rng.uniform(-0.5 * j, 0.5 * j);
        s.goals.push_back(s.start + Vec2{std::cos(theta), std::sin(theta)} * 1.2);
      }
      break;
    }
    case TaskKind::kDynamicTarget:
      s.orbit_center = {0.0, 0.0};
      s.orbit_phase = rng.uniform(0.0, 2.0 * kPi);
      s.start = s.orbit_center + jitter(rng, j);
      break;
  }
  return s;
}

Vec2 target_at(const TaskSpec& task, const Scene& scene, double time) {
  if (task.kind != TaskKind::kDynamicTarget) return scene.goals.at(0);
  const double phase = scene.orbit_phase + task.target_speed / task.orbit_radius * time;
  return scene.orbit_center + Vec2{std::cos(phase), std::sin(phase)} * task.orbit_radius;
}

EpisodeState initial_state(const TaskSpec& task, const Scene& scene) {
  EpisodeState s;
  s.agent = scene.start;
  s.target = target_at(task, scene, 0.0);
  return s;
}

bool in_workspace(Vec2 p) { return std::abs(p.x) <= 1.0 && std::abs(p.y) <= 1.0; }

bool collides(const Scene& scene, Vec2 p, Vec2 q) {
  if (!in_workspace(p) || !in_workspace(q)) return true;
  return scene.obstacle_radius > 0 && segment_distance(scene.obstacle, p, q) <= scene.obstacle_radius;
}

std::vector<Vec2> expert_path(const TaskSpec& task, const Scene& scene, Vec2 from, std::size_t mode, Rng& rng) {
  if (mode >= task.modes) throw Error("expert_path: mode " + std::to_string(mode) + " out of range");
  switch (task.kind) {
    case TaskKind::kFork2d: return fork_path(task, scene, from, mode, rng);
    case TaskKind::kMultigoal: return multigoal_path(task, scene, from, mode, rng);
    case TaskKind::kDynamicTarget: break;
  }
  throw Error("expert_path: dynamic-target paths depend on the target; use expert_trajectory");
}

TensorF window_actions(const std::vector<Vec2>& path, std::size_t progress, std::size_t horizon) {
  TensorF out({horizon, 2});
  for (std::size_t h = 0; h < horizon; ++h) {
    const std::size_t k = progress + h;
    if (k + 1 >= path.size()) break;
    const Vec2 d = path[k + 1] - path[k];
    out[2 * h] = static_cast<float>(d.x);
    out[2 * h + 1] = static_cast<float>(d.y);
  }
  return out;
}

TensorF expert_trajectory(const TaskSpec& task, const Scene& scene, const EpisodeState& state, std::size_t mode,
                          Rng& rng) {
  if (task.kind == TaskKind::kDynamicTarget) {
    return window_actions(pursuit_path(task, state.agent, state.target), 0, task.horizon);
  }
  return window_actions(expert_path(task, scene, state.agent, mode, rng), 0, task.horizon);
}

RawObservation render_observation(const TaskSpec& task, const Scene& scene, const EpisodeState& state,
                                  const Featurizer& feat) {
  const std::size_t n = feat.config().grid;
  std::vector<Vec2> goals = scene.goals;
  if (task.kind == TaskKind::kDynamicTarget) goals = {state.target};

  std::vector<float> occ(n * n), goal(n * n), sdf(n * n);
  const double cell = 2.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const Vec2 p{-1.0 + (static_cast<double>(c) + 0.5) * cell, 1.0 - (static_cast<double>(r) + 0.5) * cell};
      double g = 0.0, nearest = 1e9;
      for (const Vec2& q : goals) {
        const double d = (p - q).norm();
        g += std::exp(-d * d / (2.0 * kBlobSigma * kBlobSigma));
        nearest = std::min(nearest, d - kMarkerRadius);
      }
      goal[r * n + c] = static_cast<float>(g);
      if (scene.obstacle_radius > 0) {
        const double d = (p - scene.obstacle).norm() - scene.obstacle_radius;
        occ[r * n + c] = static_cast<float>(std::clamp(0.5 - d / cell, 0.0, 1.0));
        sdf[r * n + c] = static_cast<float>(d);
      } else {
        sdf[r * n + c] = static_cast<float>(nearest);
      }
    }
  }

  // Point set: obstacle surface (label 0) and goal markers (label 1).
  const std::size_t total = 32;
  const std::size_t obstacle_pts = scene.obstacle_radius > 0 ? 24 : 0;
  TensorF points({total, 3});
  for (std::size_t i = 0; i < obstacle_pts; ++i) {
    const double a = 2.0 * kPi * static_cast<double>(i) / static_cast<double>(obstacle_pts);
    points[3 * i] = static_cast<float>(scene.obstacle.x + scene.obstacle_radius * std::cos(a));
    points[3 * i + 1] = static_cast<float>(scene.obstacle.y + scene.obstacle_radius * std::sin(a));
    points[3 * i + 2] = 0.0f;
  }
  const std::size_t marker_pts = total - obstacle_pts;
  for (std::size_t i = 0; i < marker_pts; ++i) {
    const Vec2 q = goals[i % goals.size()];
    const std::size_t per = (marker_pts + goals.size() - 1) / goals.size();
    const double a = 2.0 * kPi * static_cast<double>(i / goals.size()) / static_cast<double>(per);
    float* row = points.ptr() + 3 * (obstacle_pts + i);
    row[0] = static_cast<float>(q.x + kMarkerRadius * std::cos(a));
    row[1] = static_cast<float>(q.y + kMarkerRadius * std::sin(a));
    row[2] = 1.0f;
  }

  RawObservation obs;
  obs.appearance = feat.appearance_tokens(occ, goal);
  obs.geometry = feat.geometry_tokens(sdf);
  obs.points = std::move(points);
  obs.proprio = TensorF::from({2}, {static_cast<float>(state.agent.x), static_cast<float>(state.agent.y)});
  return obs;
}

Demo sample_expert_demo(const TaskSpec& task, const Featurizer& feat, Rng& rng) {
  Demo d;
  d.scene = sample_scene(task, rng);
  d.state = initial_state(task, d.scene);
  d.mode = rng.index(task.modes);
  if (task.kind == TaskKind::kDynamicTarget) {
    const Vec2 q = d.state.target;
    const double pick = rng.uniform();
    if (pick < 1.0 / 3.0) {
      // start state
    } else if (pick < 2.0 / 3.0) {
      d.state.agent = d.scene.start + (q - d.scene.start) * rng.uniform() + jitter(rng, 0.05);
    } else {
      const double a = rng.uniform(0.0, 2.0 * kPi);
      d.state.agent = q + Vec2{std::cos(a), std::sin(a)} * rng.uniform(0.0, 0.2);
    }
    d.traj = expert_trajectory(task, d.scene, d.state, 0, rng);
  } else {
    const auto path = expert_path(task, d.scene, d.scene.start, d.mode, rng);
    if (!rng.bernoulli(task.start_fraction)) d.progress = 1 + rng.index(task.horizon - 1);
    d.state.agent = path[d.progress];
    d.traj = window_actions(path, d.progress, task.horizon);
  }
  d.obs = render_observation(task, d.scene, d.state, feat);
  return d;
}

Demo make_demo(const TaskSpec& task, const Featurizer& feat, std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, index));
  return sample_expert_demo(task, feat, rng);
}

Demo make_start_case(const TaskSpec& task, const Featurizer& feat, std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed ^ 0x4e1d07ULL, index));
  Demo d;
  d.scene = sample_scene(task, rng);
  d.state = initial_state(task, d.scene);
  d.mode = rng.index(task.modes);
  d.traj = expert_trajectory(task, d.scene, d.state, d.mode, rng);
  d.obs = render_observation(task, d.scene, d.state, feat);
  return d;
}

EpisodeState step_env(const TaskSpec& task, const Scene& scene, const EpisodeState& state, Vec2 action, double dt) {
  EpisodeState next = state;
  if (state.done) return next;
  const Vec2 a{std::clamp(action.x, -task.action_bound, task.action_bound),
               std::clamp(action.y, -task.action_bound, task.action_bound)};
  next.agent = state.agent + a;
  next.time = state.time + dt;
  next.step = state.step + 1;
  next.target = target_at(task, scene, next.time);
  if (collides(scene, state.agent, next.agent)) {
    next.collided = true;
    next.done = true;
    return next;
  }
  if (is_success(task, scene, next)) {
    next.succeeded = true;
    next.done = true;
  }
  return next;
}

bool is_success(const TaskSpec& task, const Scene& scene, const EpisodeState& state) {
  if (state.collided) return false;
  if (state.succeeded) return true;
  if (task.kind == TaskKind::kMultigoal) {
    for (const Vec2& g : scene.goals) {
      if ((state.agent - g).norm() <= task.success_radius) return true;
    }
    return false;
  }
  return (state.agent - state.target).norm() <= task.success_radius;
}

}  // namespace fd
