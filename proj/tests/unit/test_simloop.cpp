#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "flowdistill/simloop.hpp"

using namespace fd;

namespace {

const EncoderConfig kEnc{};

// Planner that always returns the same trajectory and reports `nfe`.
Planner constant_planner(TensorF traj, std::uint64_t nfe) {
  return [traj = std::move(traj), nfe](const EpisodeState&, std::size_t) {
    Plan p;
    p.traj = traj;
    p.nfe = nfe;
    return p;
  };
}

// Replays one expert demo from the episode start, windowed at the current step.
Planner expert_planner(const TaskSpec& task, const Scene& scene, std::size_t mode, std::uint64_t nfe) {
  Rng rng(mode + 1);
  auto path = expert_path(task, scene, scene.start, mode, rng);
  return [task, path, nfe](const EpisodeState& s, std::size_t) {
    Plan p;
    p.traj = window_actions(path, s.step, task.horizon);
    p.nfe = nfe;
    return p;
  };
}

class ZeroPolicy : public Policy {
 public:
  explicit ZeroPolicy(std::string name) : name_(std::move(name)) {}
  std::string name() const override { return name_; }
  TensorF sample(std::span<const float>, std::size_t k, std::uint64_t) override {
    ++nfe_;
    return TensorF({k, 32, 2});
  }
  std::uint64_t nfe() const override { return nfe_; }
  void reset_nfe() override { nfe_ = 0; }

 private:
  std::string name_;
  std::uint64_t nfe_ = 0;
};

}  // namespace

TEST_CASE("hold steps are the ceiling of latency over step time") {
  CHECK(hold_steps(0.0, 0.01) == 0);
  CHECK(hold_steps(2.5, 0.01) == 1);
  CHECK(hold_steps(10.0, 0.01) == 1);
  CHECK(hold_steps(20.0, 0.01) == 2);
  CHECK(hold_steps(20.0001, 0.01) == 3);
  CHECK(hold_steps(100.5, 0.01) == 11);
  CHECK(hold_steps(30.0, 0.001) == 30);
  const LatencyModel m;
  CHECK(m.latency_ms(50, 123.0) == 100.5);
  CHECK(m.latency_ms(1, 0.0) == 2.5);
  LatencyModel wall;
  wall.measured = true;
  CHECK(wall.latency_ms(50, 7.25) == 7.25);
}

TEST_CASE("critical speed satisfies the displacement inequality") {
  const LatencyModel m;
  const TaskSpec task = default_task(TaskKind::kDynamicTarget);
  const double s = critical_speed(m, 50, 0.01, task.success_radius);
  const std::size_t h = hold_steps(m.latency_ms(50, 0), 0.01);
  CHECK(h == 11);
  CHECK(s == doctest::Approx(0.625));
  // Target displacement during one hold exceeds the success radius.
  CHECK(s * double(h) * 0.01 > task.success_radius);
  // A 1-NFE policy loses far less ground per replan.
  CHECK(s * double(hold_steps(m.latency_ms(1, 0), 0.01)) * 0.01 < task.success_radius);
}

TEST_CASE("world steps consumed during inference are counted exactly") {
  const TaskSpec task = default_task(TaskKind::kFork2d);
  Rng rng(1);
  const Scene scene = sample_scene(task, rng);
  const EpisodeState start = initial_state(task, scene);
  RolloutConfig cfg;
  cfg.step_budget = 190;
  const LatencyModel m;  // 50 NFE -> 100.5 ms -> 11 held steps
  const auto r = run_episode(constant_planner(TensorF({32, 2}), 50), task, scene, start, m, cfg);
  CHECK_FALSE(r.success);
  CHECK(r.steps == 190);
  CHECK(r.replans == 10);  // 19 steps per replan
  CHECK(r.nfe == 500);
  CHECK(r.sim_latency_ms == doctest::Approx(1005.0));
}

TEST_CASE("expert oracle planner succeeds on the static task") {
  const TaskSpec task = default_task(TaskKind::kFork2d);
  const Featurizer feat(kEnc);
  for (std::size_t i = 0; i < 5; ++i) {
    const Demo c = make_start_case(task, feat, 21, i);
    for (std::size_t mode = 0; mode < 2; ++mode) {
      const auto r = run_episode(expert_planner(task, c.scene, mode, 1), task, c.scene, c.state,
                                 LatencyModel{0, 0, false}, RolloutConfig{});
      CHECK(r.success);
      CHECK_FALSE(r.collided);
    }
  }
}

TEST_CASE("without latency the outcome does not depend on NFE") {
  const TaskSpec task = default_task(TaskKind::kFork2d);
  const Featurizer feat(kEnc);
  const Demo c = make_start_case(task, feat, 4, 0);
  const LatencyModel off{0, 0, false};
  const auto a = run_episode(expert_planner(task, c.scene, 0, 1), task, c.scene, c.state, off, RolloutConfig{});
  const auto b = run_episode(expert_planner(task, c.scene, 0, 50), task, c.scene, c.state, off, RolloutConfig{});
  CHECK(a.success == b.success);
  CHECK(a.steps == b.steps);
  CHECK(a.replans == b.replans);
  CHECK(a.final_distance == b.final_distance);
  CHECK(a.sim_latency_ms == 0.0);
}

TEST_CASE("execute-step bounds and the open-loop limit") {
  const TaskSpec task = default_task(TaskKind::kFork2d);
  Rng rng(2);
  const Scene scene = sample_scene(task, rng);
  const EpisodeState start = initial_state(task, scene);
  const LatencyModel off{0, 0, false};
  RolloutConfig cfg;
  cfg.execute_steps = 0;
  CHECK_THROWS_AS(run_episode(constant_planner(TensorF({32, 2}), 1), task, scene, start, off, cfg), Error);
  cfg.execute_steps = 33;
  CHECK_THROWS_AS(run_episode(constant_planner(TensorF({32, 2}), 1), task, scene, start, off, cfg), Error);
  cfg.execute_steps = 32;
  cfg.step_budget = 64;
  CHECK(run_episode(constant_planner(TensorF({32, 2}), 1), task, scene, start, off, cfg).replans == 2);
  cfg.execute_steps = 1;
  CHECK(run_episode(constant_planner(TensorF({32, 2}), 1), task, scene, start, off, cfg).replans == 64);
  CHECK_THROWS_AS(run_episode(constant_planner(TensorF({31, 2}), 1), task, scene, start, off, RolloutConfig{}),
                  ShapeError);
  LatencyModel bad;
  bad.c_net_ms = -1;
  CHECK_THROWS_AS(run_episode(constant_planner(TensorF({32, 2}), 1), task, scene, start, bad, RolloutConfig{}),
                  Error);
}

TEST_CASE("agent holds still while computing unless plan continuation is on") {
  TaskSpec task = default_task(TaskKind::kFork2d);
  Rng rng(3);
  const Scene scene = sample_scene(task, rng);
  const EpisodeState start = initial_state(task, scene);
  TensorF traj({32, 2});
  for (std::size_t h = 0; h < 32; ++h) traj[2 * h] = 0.001f;  // slow drift in x
  RolloutConfig cfg;
  cfg.step_budget = 2 * (11 + 8);
  const LatencyModel m;
  const auto held = run_episode(constant_planner(traj, 50), task, scene, start, m, cfg);
  cfg.continue_plan = true;
  const auto cont = run_episode(constant_planner(traj, 50), task, scene, start, m, cfg);
  // Held: 16 moving steps; continued: 16 plus 11 during the second computation.
  EpisodeState s = start;
  for (int i = 0; i < 16; ++i) s = step_env(task, scene, s, {0.001, 0}, cfg.dt);
  CHECK(held.final_distance == doctest::Approx((s.agent - s.target).norm()).epsilon(1e-9));
  for (int i = 0; i < 11; ++i) s = step_env(task, scene, s, {0.001, 0}, cfg.dt);
  CHECK(cont.final_distance == doctest::Approx((s.agent - s.target).norm()).epsilon(1e-9));
}

TEST_CASE("sweep grid has one row per policy and speed") {
  const TaskSpec task = default_task(TaskKind::kDynamicTarget);
  const Featurizer feat(kEnc);
  Encoder<float> enc(kEnc, 1);
  ZeroPolicy a("a"), b("b");
  Policy* ps[] = {&a, &b};
  const double speeds[] = {0.0, 0.2, 0.6};
  RolloutConfig cfg;
  cfg.step_budget = 16;
  std::vector<EpisodeRow> rows;
  const auto cells = sweep_dynamics(ps, enc, feat, task, speeds, 2, LatencyModel{}, cfg, 5, &rows);
  CHECK(cells.size() == 6);
  CHECK(rows.size() == 12);
  CHECK(cells[4].policy == "b");
  CHECK(cells[4].speed == 0.2);
  const auto dir = std::filesystem::temp_directory_path() / "fd_test_simloop";
  std::filesystem::create_directories(dir);
  write_sweep_csv(dir / "sweep.csv", cells);
  write_episodes_csv(dir / "episodes.csv", rows);
  auto lines = [](const std::filesystem::path& p) {
    std::ifstream f(p);
    std::string s;
    std::size_t n = 0;
    while (std::getline(f, s)) ++n;
    return n;
  };
  CHECK(lines(dir / "sweep.csv") == 7);
  CHECK(lines(dir / "episodes.csv") == 13);
  std::filesystem::remove_all(dir);
  const double none[] = {0.0};
  CHECK_THROWS_AS(sweep_dynamics(std::span<Policy* const>{}, enc, feat, task, none, 1, LatencyModel{}, cfg, 0), Error);
  CHECK_THROWS_AS(sweep_dynamics(ps, enc, feat, task, std::span<const double>{}, 1, LatencyModel{}, cfg, 0), Error);
}

TEST_CASE("episodes are reproducible") {
  const TaskSpec task = default_task(TaskKind::kFork2d);
  const Featurizer feat(kEnc);
  Encoder<float> enc(kEnc, 1);
  NetConfig nc;
  StudentNet<float> net(nc, 2);
  StudentPolicy p(net);
  RolloutConfig cfg;
  cfg.step_budget = 40;
  const auto a = run_episodes(p, enc, feat, task, 3, LatencyModel{}, cfg, 9);
  const auto b = run_episodes(p, enc, feat, task, 3, LatencyModel{}, cfg, 9);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i].result.final_distance == b[i].result.final_distance);
    CHECK(a[i].result.steps == b[i].result.steps);
  }
}
