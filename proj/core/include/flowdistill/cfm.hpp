#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flowdistill/encoder.hpp"
#include "flowdistill/nets.hpp"
#include "flowdistill/tasks.hpp"

namespace fd {

struct FlowSchedule {
  double mu = 0.0;
  double sigma = 1.0;
  double eps = 1e-3;  // clamp on 1 - t in the velocity
};

void validate(const FlowSchedule& s);

// t = sigmoid(mu + sigma * n), n standard normal.
double sample_time(const FlowSchedule& s, Rng& rng);

// (1 - t) tau0 + t tau1, elementwise.
template <typename T>
Tensor<T> interpolate_path(const Tensor<T>& tau0, const Tensor<T>& tau1, double t);

// (d_out - tau_t) / max(1 - t, eps)
template <typename T>
Tensor<T> velocity_from_data_pred(const Tensor<T>& d_out, const Tensor<T>& tau_t, double t, double eps);

// Data-space prediction D(tau_t, t, E_obs) recorded on a graph.
template <typename T>
using DataPredictor =
    std::function<Var(Graph<T>& g, Var tau_t, std::span<const double> times, Var e_obs, const Tensor<T>* keep)>;

// Mean squared error between D(tau_t, t, E_obs) and tau1 over a batch (B, H, D).
// Draws tau0 ~ N(0, I) and t from the schedule per item; with anti_shortcut
// the embedded tau_t of item b is dropped with probability mask_probability(t_b).
template <typename T>
Var cfm_loss(Graph<T>& g, const DataPredictor<T>& predict, const Tensor<T>& tau1, Var e_obs, const FlowSchedule& s,
             Rng& rng, bool anti_shortcut = true);

enum class Integrator { kEuler, kHeun };

std::string integrator_name(Integrator i);
Integrator parse_integrator(const std::string& name);

struct OdeSamplerConfig {
  Integrator integrator = Integrator::kEuler;
  std::size_t steps = 50;
};

void validate(const OdeSamplerConfig& c);

// Gradient-free prediction on plain tensors: (B, H, D), B times, (B, obs) -> (B, H, D).
using TensorPredictor =
    std::function<TensorF(const TensorF& tau, std::span<const double> times, const TensorF& e_obs)>;

TensorPredictor make_predictor(TeacherNet<float>& teacher);

struct OdeTrace {
  TensorF final;     // after the jump to the prediction
  TensorF pre_jump;  // state at t = 1 - 1/N
};

// Integrates from tau0 over N uniform steps; the last step replaces the state
// with the prediction. Evaluations: N (Euler) or 2N - 1 (Heun).
OdeTrace sample_ode(const TensorPredictor& predict, const TensorF& e_obs, const TensorF& tau0,
                    const OdeSamplerConfig& cfg, double eps = 1e-3);
// Same with tau0 drawn from rng.
TensorF sample_ode(const TensorPredictor& predict, const TensorF& e_obs, Shape traj_shape,
                   const OdeSamplerConfig& cfg, Rng& rng, double eps = 1e-3);

// K independent solves for one observation embedding (obs_dim). Sample k
// starts from the stream derive_seed(seed, k). Result (K, H, D) in task units.
TensorF generate_teacher_set(TeacherNet<float>& teacher, std::span<const float> e_obs, std::size_t k,
                             const OdeSamplerConfig& cfg, std::uint64_t seed, double eps = 1e-3);

struct TeacherTrainConfig {
  std::size_t epochs = 300;
  std::size_t batch = 64;
  double lr = 1e-3;
  double lr_final = 1e-4;  // cosine decay target
  std::uint64_t seed = 0;
  FlowSchedule schedule;
  bool anti_shortcut = true;
  // Share of items whose geometry tokens get heavy noise, so the gate learns to
  // lean on appearance when geometry is unreliable.
  double geometry_corruption = 0.1;
  double corruption_std = 3.0;
  // Stop when the epoch loss has not improved by min_delta for this many epochs; 0 disables.
  std::size_t patience = 0;
  double min_delta = 1e-4;
  std::filesystem::path log_csv;  // optional per-epoch log
};

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> step_loss;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
};

void write_loss_csv(const std::filesystem::path& path, const TrainLog& log);

// Joint Adam optimization of encoder and teacher on the CFM loss.
TrainLog train_teacher(std::span<const Demo> demos, Encoder<float>& encoder, TeacherNet<float>& teacher,
                       const TeacherTrainConfig& cfg);

// Trajectory-set file: "TSET", version, K, H, D, then K*H*D f32.
void write_tset(const std::filesystem::path& path, const TensorF& set);
TensorF read_tset(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_tset(const TensorF& set);
TensorF decode_tset(std::vector<std::uint8_t> bytes, const std::string& what = "TSET");
// One row per (k, h): k,h,a_0..a_{D-1}
void export_tset_csv(const std::filesystem::path& path, const TensorF& set);

}  // namespace fd
