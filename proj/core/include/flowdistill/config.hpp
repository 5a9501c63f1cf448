#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "flowdistill/cfm.hpp"
#include "flowdistill/simloop.hpp"

namespace fd {

// Invalid experiment configuration; the message starts with the dotted key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

struct TeacherBlock {
  std::size_t epochs = 60;
  std::size_t batch = 64;
  double lr = 2e-3;
  double lr_final = 1e-4;
  FlowSchedule schedule;
  bool anti_shortcut = true;
  double geometry_corruption = 0.1;
  double corruption_std = 3.0;
  OdeSamplerConfig sampler;  // used for the teacher sets and the teacher policy
};

struct DistillBlock {
  std::size_t k = 16;
  std::size_t observations = 256;  // corpus observations given teacher sets
  std::size_t epochs = 40;
  std::size_t batch = 16;
  double lr = 1e-3;
  double lr_final = 1e-4;
  // Initialize the student from the teacher minus its time pathway.
  bool warm_start = true;
};

struct EvalBlock {
  std::size_t observations = 200;  // held-out start states
  std::size_t samples = 16;        // trajectories per observation and policy
  std::size_t per_mode = 256;      // expert demos per mode for the reference
  double percentile = 0.99;
  std::size_t bootstrap = 1000;
  std::size_t naive_steps = 1;  // ODE steps of the naive teacher
  std::size_t timing_repeats = 100;
};

struct SimBlock {
  LatencyModel latency;
  RolloutConfig rollout;
  std::size_t episodes = 100;
  std::vector<double> speeds{0.0, 0.1, 0.2, 0.3, 0.4, 0.5};
  // Add the speed at which the teacher loses the target to the sweep.
  bool include_critical = true;
};

struct AblateBlock {
  std::vector<std::size_t> ks{1, 4, 10, 16};
  std::vector<std::size_t> execute_steps{1, 4, 8, 16, 32};
  std::size_t episodes = 50;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  TaskSpec task = default_task(TaskKind::kFork2d);
  std::size_t demos = 2000;
  EncoderConfig encoder;
  NetConfig network;  // horizon, action_dim and obs_dim follow the task and encoder
  TeacherBlock cfm;
  DistillBlock distill;
  EvalBlock eval;
  SimBlock simloop;
  AblateBlock ablate;
  std::filesystem::path output = "runs/fork2d";
};

// Defaults for the named task.
ExperimentConfig default_config(TaskKind kind = TaskKind::kFork2d);

// Parses and validates; unknown keys and bad values raise ConfigError naming
// the key. Missing keys keep their defaults.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical JSON with every field spelled out; parse_config inverts it.
std::string config_to_json(const ExperimentConfig& cfg);

// Cross-field checks; also run by parse_config.
void validate(const ExperimentConfig& cfg);

}  // namespace fd
