#include "flowdistill/simloop.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

namespace fd {

double LatencyModel::latency_ms(std::uint64_t nfe, double wall_ms) const {
  if (measured) return wall_ms;
  return c_net_ms * static_cast<double>(nfe) + c_ovh_ms;
}

void validate(const LatencyModel& m) {
  if (m.c_net_ms < 0 || m.c_ovh_ms < 0) throw Error("latency: costs must be >= 0");
}

void validate(const RolloutConfig& c, std::size_t horizon) {
  if (c.execute_steps < 1 || c.execute_steps > horizon) {
    throw Error("rollout: execute_steps must lie in [1, " + std::to_string(horizon) + "]");
  }
  if (!(c.dt > 0)) throw Error("rollout: dt must be positive");
  if (c.step_budget == 0) throw Error("rollout: step_budget must be positive");
}

std::size_t hold_steps(double latency_ms, double dt) {
  if (latency_ms <= 0) return 0;
  // Tolerate representation error so that exact multiples do not round up.
  const double steps = latency_ms / (dt * 1000.0);
  return static_cast<std::size_t>(std::ceil(steps - 1e-9));
}

double critical_speed(const LatencyModel& m, std::uint64_t nfe, double dt, double success_radius) {
  const std::size_t h = hold_steps(m.latency_ms(nfe, 0.0), dt);
  return 1.5 * success_radius / (static_cast<double>(h + 1) * dt);
}

EpisodeResult run_episode(const Planner& planner, const TaskSpec& task, const Scene& scene, EpisodeState start,
                          const LatencyModel& latency, const RolloutConfig& cfg) {
  validate(latency);
  validate(cfg, task.horizon);
  EpisodeResult r;
  EpisodeState s = start;
  TensorF previous;
  std::size_t previous_at = 0;
  auto act = [&](Vec2 a) {
    s = step_env(task, scene, s, a, cfg.dt);
    ++r.steps;
  };
  while (!s.done && r.steps < cfg.step_budget) {
    const Plan plan = planner(s, r.replans);
    if (plan.traj.shape() != Shape{task.horizon, 2}) {
      throw ShapeError("rollout: plan has shape " + shape_str(plan.traj.shape()));
    }
    ++r.replans;
    r.nfe += plan.nfe;
    const double ms = latency.latency_ms(plan.nfe, plan.wall_ms);
    r.sim_latency_ms += ms;
    const std::size_t hold = hold_steps(ms, cfg.dt);
    for (std::size_t k = 0; k < hold && !s.done && r.steps < cfg.step_budget; ++k) {
      Vec2 a{0, 0};
      if (cfg.continue_plan && !previous.empty() && previous_at < task.horizon) {
        a = {previous[2 * previous_at], previous[2 * previous_at + 1]};
        ++previous_at;
      }
      act(a);
    }
    // The plan was made for the state at observation time.
    for (std::size_t k = 0; k < cfg.execute_steps && !s.done && r.steps < cfg.step_budget; ++k) {
      act({plan.traj[2 * k], plan.traj[2 * k + 1]});
    }
    previous = plan.traj;
    previous_at = cfg.execute_steps;
  }
  r.success = s.succeeded || is_success(task, scene, s);
  r.collided = s.collided;
  r.final_distance = (s.agent - s.target).norm();
  return r;
}

Planner make_planner(Policy& policy, Encoder<float>& encoder, const Featurizer& feat, const TaskSpec& task,
                     const Scene& scene, std::uint64_t seed) {
  return [&policy, &encoder, &feat, task, scene, seed](const EpisodeState& state, std::size_t replan) {
    const auto t0 = std::chrono::steady_clock::now();
    const RawObservation obs = render_observation(task, scene, state, feat);
    const RawObservation* one[] = {&obs};
    const TensorF e = encode_observations(encoder, one);
    const std::uint64_t before = policy.nfe();
    TensorF traj = policy.sample(e.data(), 1, derive_seed(seed, replan));
    Plan p;
    p.nfe = policy.nfe() - before;
    p.traj = TensorF({task.horizon, 2}, std::move(traj.vec()));
    p.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return p;
  };
}

std::vector<EpisodeRow> run_episodes(Policy& policy, Encoder<float>& encoder, const Featurizer& feat,
                                     const TaskSpec& task, std::size_t episodes, const LatencyModel& latency,
                                     const RolloutConfig& cfg, std::uint64_t seed) {
  std::vector<EpisodeRow> rows;
  rows.reserve(episodes);
  for (std::size_t i = 0; i < episodes; ++i) {
    const Demo c = make_start_case(task, feat, seed, i);
    EpisodeRow row;
    row.episode = i;
    row.policy = policy.name();
    row.speed = task.target_speed;
    row.result = run_episode(make_planner(policy, encoder, feat, task, c.scene, derive_seed(seed + 1, i)), task,
                             c.scene, c.state, latency, cfg);
    rows.push_back(std::move(row));
  }
  return rows;
}

double success_rate(std::span<const EpisodeRow> rows) {
  if (rows.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& r : rows) ok += r.result.success;
  return static_cast<double>(ok) / static_cast<double>(rows.size());
}

SweepCell summarize(std::span<const EpisodeRow> rows, std::uint64_t seed) {
  SweepCell c;
  if (!rows.empty()) {
    c.policy = rows.front().policy;
    c.speed = rows.front().speed;
  }
  c.episodes = rows.size();
  std::vector<double> v;
  for (const auto& r : rows) {
    c.successes += r.result.success;
    v.push_back(r.result.success ? 1.0 : 0.0);
  }
  c.rate = bootstrap_mean_ci(v, 1000, seed);
  return c;
}

std::vector<SweepCell> sweep_dynamics(std::span<Policy* const> policies, Encoder<float>& encoder,
                                      const Featurizer& feat, const TaskSpec& task, std::span<const double> speeds,
                                      std::size_t episodes, const LatencyModel& latency, const RolloutConfig& cfg,
                                      std::uint64_t seed, std::vector<EpisodeRow>* all_rows) {
  if (speeds.empty()) throw Error("sweep: speed list is empty");
  if (policies.empty()) throw Error("sweep: no policies");
  std::vector<SweepCell> cells;
  for (Policy* p : policies) {
    for (double speed : speeds) {
      TaskSpec t = task;
      t.target_speed = speed;
      validate(t);
      const auto rows = run_episodes(*p, encoder, feat, t, episodes, latency, cfg, seed);
      cells.push_back(summarize(rows, seed));
      if (all_rows) all_rows->insert(all_rows->end(), rows.begin(), rows.end());
    }
  }
  return cells;
}

void write_episodes_csv(const std::filesystem::path& path, std::span<const EpisodeRow> rows) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f.precision(9);
  f << "episode,policy,speed,success,collided,steps,replans,sim_latency_ms\n";
  for (const auto& r : rows) {
    f << r.episode << ',' << r.policy << ',' << r.speed << ',' << r.result.success << ',' << r.result.collided << ','
      << r.result.steps << ',' << r.result.replans << ',' << r.result.sim_latency_ms << '\n';
  }
  if (!f) throw Error("failed writing " + path.string());
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepCell> cells) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f.precision(9);
  f << "policy,speed,episodes,successes,success_rate,ci_lo,ci_hi\n";
  for (const auto& c : cells) {
    f << c.policy << ',' << c.speed << ',' << c.episodes << ',' << c.successes << ',' << c.rate.mean << ','
      << c.rate.lo << ',' << c.rate.hi << '\n';
  }
  if (!f) throw Error("failed writing " + path.string());
}

}  // namespace fd
