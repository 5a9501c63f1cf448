#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flowdistill/metrics.hpp"

namespace fd {

struct LatencyModel {
  double c_net_ms = 2.0;   // per network evaluation
  double c_ovh_ms = 0.5;   // per replan
  bool measured = false;   // use wall-clock instead of the synthetic costs

  double latency_ms(std::uint64_t nfe, double wall_ms) const;
};

void validate(const LatencyModel& m);

struct RolloutConfig {
  std::size_t execute_steps = 8;  // actions executed per replan
  std::size_t step_budget = 200;
  double dt = 0.01;  // world seconds per environment step
  // While the policy computes, keep executing the previous plan instead of holding still.
  bool continue_plan = false;
};

void validate(const RolloutConfig& c, std::size_t horizon);

// Environment steps that elapse while computing for latency_ms.
std::size_t hold_steps(double latency_ms, double dt);

// Target speed at which a policy with the given NFE loses the target: the
// displacement over one hold plus one step is 1.5 success radii.
double critical_speed(const LatencyModel& m, std::uint64_t nfe, double dt, double success_radius);

struct Plan {
  TensorF traj;  // (H, 2) task units
  std::uint64_t nfe = 0;
  double wall_ms = 0.0;
};

// Produces a plan from the current state; `replan` counts from zero.
using Planner = std::function<Plan(const EpisodeState& state, std::size_t replan)>;

struct EpisodeResult {
  bool success = false;
  bool collided = false;
  std::size_t steps = 0;
  std::size_t replans = 0;
  double sim_latency_ms = 0.0;
  double final_distance = 0.0;
  std::uint64_t nfe = 0;
};

EpisodeResult run_episode(const Planner& planner, const TaskSpec& task, const Scene& scene, EpisodeState start,
                          const LatencyModel& latency, const RolloutConfig& cfg);

// Observes, encodes and samples one trajectory per replan from the policy.
Planner make_planner(Policy& policy, Encoder<float>& encoder, const Featurizer& feat, const TaskSpec& task,
                     const Scene& scene, std::uint64_t seed);

struct EpisodeRow {
  std::size_t episode = 0;
  std::string policy;
  double speed = 0.0;
  EpisodeResult result;
};

// Episodes 0..n-1 start from make_start_case(task, feat, seed, i).
std::vector<EpisodeRow> run_episodes(Policy& policy, Encoder<float>& encoder, const Featurizer& feat,
                                     const TaskSpec& task, std::size_t episodes, const LatencyModel& latency,
                                     const RolloutConfig& cfg, std::uint64_t seed);

struct SweepCell {
  std::string policy;
  double speed = 0.0;
  std::size_t episodes = 0;
  std::size_t successes = 0;
  ConfidenceInterval rate;
};

double success_rate(std::span<const EpisodeRow> rows);
SweepCell summarize(std::span<const EpisodeRow> rows, std::uint64_t seed = 0);

std::vector<SweepCell> sweep_dynamics(std::span<Policy* const> policies, Encoder<float>& encoder,
                                      const Featurizer& feat, const TaskSpec& task, std::span<const double> speeds,
                                      std::size_t episodes, const LatencyModel& latency, const RolloutConfig& cfg,
                                      std::uint64_t seed, std::vector<EpisodeRow>* all_rows = nullptr);

// episode,policy,speed,success,collided,steps,replans,sim_latency_ms
void write_episodes_csv(const std::filesystem::path& path, std::span<const EpisodeRow> rows);
// policy,speed,episodes,successes,success_rate,ci_lo,ci_hi
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepCell> cells);

}  // namespace fd
