#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "flowdistill/encoder.hpp"
#include "flowdistill/rng.hpp"

namespace fd {

struct Vec2 {
  double x = 0.0, y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const { return std::hypot(x, y); }
};

enum class TaskKind { kFork2d, kMultigoal, kDynamicTarget };

std::string task_name(TaskKind kind);
TaskKind parse_task(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::kFork2d;
  std::size_t horizon = 32;
  std::size_t modes = 2;
  double noise = 0.02;  // expert jitter, workspace units
  double success_radius = 0.05;
  double action_bound = 0.15;  // per-component, per step

  // fork2d
  double obstacle_radius = 0.25;
  double scene_jitter = 0.05;
  double detour_clearance = 0.15;
  // Share of demos observed at the start state; the rest are taken along the path.
  double start_fraction = 0.5;

  // dynamic-target
  double target_speed = 0.0;  // along the orbit, units per second
  double orbit_radius = 0.5;
  double pursuit_gain = 0.6;
  double pursuit_cap = 0.15;
};

TaskSpec default_task(TaskKind kind);
void validate(const TaskSpec& task);

struct Scene {
  Vec2 start;
  std::vector<Vec2> goals;  // fork2d: one; multigoal: M; dynamic-target: unused
  Vec2 obstacle;
  double obstacle_radius = 0.0;  // zero means no obstacle
  Vec2 orbit_center;
  double orbit_phase = 0.0;
};

struct EpisodeState {
  Vec2 agent;
  Vec2 target;
  double time = 0.0;  // seconds
  std::size_t step = 0;
  bool done = false;
  bool collided = false;
  bool succeeded = false;
};

Scene sample_scene(const TaskSpec& task, Rng& rng);
EpisodeState initial_state(const TaskSpec& task, const Scene& scene);
Vec2 target_at(const TaskSpec& task, const Scene& scene, double time);

// Segment p->q touches the obstacle, or leaves the workspace.
bool collides(const Scene& scene, Vec2 p, Vec2 q);
bool in_workspace(Vec2 p);

// Expert positions p_0..p_H from `from` in the given mode.
std::vector<Vec2> expert_path(const TaskSpec& task, const Scene& scene, Vec2 from, std::size_t mode, Rng& rng);
// Per-step deltas starting at `progress`, holding still after the path ends.
TensorF window_actions(const std::vector<Vec2>& path, std::size_t progress, std::size_t horizon);
// Fresh expert trajectory (H, 2) from the state in the given mode.
TensorF expert_trajectory(const TaskSpec& task, const Scene& scene, const EpisodeState& state, std::size_t mode,
                          Rng& rng);

RawObservation render_observation(const TaskSpec& task, const Scene& scene, const EpisodeState& state,
                                  const Featurizer& feat);

struct Demo {
  RawObservation obs;
  TensorF traj;  // (H, 2)
  std::size_t mode = 0;
  Scene scene;
  EpisodeState state;
  std::size_t progress = 0;
};

Demo sample_expert_demo(const TaskSpec& task, const Featurizer& feat, Rng& rng);
// Demo number `index` of the corpus seeded by `seed`.
Demo make_demo(const TaskSpec& task, const Featurizer& feat, std::uint64_t seed, std::size_t index);
// Held-out evaluation case: a fresh scene observed at its start state.
Demo make_start_case(const TaskSpec& task, const Featurizer& feat, std::uint64_t seed, std::size_t index);

// Position-delta step; actions are clipped to the bound. The dynamic target
// advances by dt regardless of the action.
EpisodeState step_env(const TaskSpec& task, const Scene& scene, const EpisodeState& state, Vec2 action, double dt);
bool is_success(const TaskSpec& task, const Scene& scene, const EpisodeState& state);

}  // namespace fd
