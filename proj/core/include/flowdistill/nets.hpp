#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flowdistill/graph.hpp"
#include "flowdistill/rng.hpp"

namespace fd {

struct NetConfig {
  std::size_t horizon = 32;
  std::size_t action_dim = 2;
  std::size_t channels_lo = 64;   // width at full horizon resolution
  std::size_t channels_hi = 128;  // width after the single downsample
  std::size_t embed_dim = 32;     // sinusoidal time embedding size
  std::size_t time_hidden = 64;
  std::size_t obs_dim = 80;
  std::size_t kernel = 3;
  // Trajectories are divided by this before entering the network.
  double action_scale = 0.1;
};

void validate(const NetConfig& cfg);

// Interleaved sin/cos embedding of t in [0,1] at geometrically spaced frequencies.
std::vector<double> sinusoidal_embed(double t, std::size_t dim);

// Probability that the noisy-trajectory features of one sample are zeroed.
double mask_probability(double t);

// Per-sample keep multipliers (0 or 1) for a batch of flow times.
template <typename T>
Tensor<T> draw_keep_mask(std::span<const double> times, Rng& rng);

// Zeroes the embedded trajectory features of the masked rows of `features` (B, H, C).
template <typename T>
Var mask_noise_embedding(Graph<T>& g, Var features, std::span<const double> times, Rng& rng);

// True for parameters that belong to the flow-time pathway.
bool is_time_conditioning(const std::string& param_name);

// Temporal 1-D encoder-decoder over the horizon axis with FiLM conditioning.
//
// The time-conditioned variant is the flow-matching teacher; without time
// conditioning the same blocks form the one-step student. Parameter names are
// shared so that the student manifest equals the teacher manifest minus the
// time pathway.
template <typename T>
class TrajectoryNet {
 public:
  TrajectoryNet(const NetConfig& cfg, bool time_conditioned, std::uint64_t seed);
  TrajectoryNet(const NetConfig& cfg, bool time_conditioned, ParameterSet<T> params);

  // traj: (B, H, D) in network units; e_obs: (B, obs_dim); times: B flow
  // times (time-conditioned nets only); keep: optional (B) multipliers
  // applied to the embedded trajectory features.
  Var forward(Graph<T>& g, Var traj, Var e_obs, std::span<const double> times, const Tensor<T>* keep = nullptr);

  const NetConfig& config() const { return cfg_; }
  bool time_conditioned() const { return time_conditioned_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

  // Network evaluations, counted per trajectory in a batch.
  std::uint64_t nfe() const { return nfe_->load(); }
  void reset_nfe() { nfe_->store(0); }

 private:
  struct Block {
    std::size_t conv_w, conv_b, film_w, film_b;
    std::size_t film_time_w = 0;
    std::size_t cout = 0;
  };

  void build_manifest(Rng* rng);
  Block make_block(const std::string& name, std::size_t cin, std::size_t cout, Rng* rng);
  Var run_block(Graph<T>& g, const Block& b, Var x, Var e_obs, Var temb, std::size_t stride);
  std::size_t add_param(const std::string& name, Shape shape, double stddev, Rng* rng);

  NetConfig cfg_;
  bool time_conditioned_;
  ParameterSet<T> params_;
  std::size_t in_w_ = 0, in_b_ = 0, out_w_ = 0, out_b_ = 0;
  std::size_t t1_w_ = 0, t1_b_ = 0, t2_w_ = 0, t2_b_ = 0;
  Block enc_, down_, mid_, up_;
  std::unique_ptr<std::atomic<std::uint64_t>> nfe_ = std::make_unique<std::atomic<std::uint64_t>>(0);
};

// D_theta(tau_t, t, E_obs): predicts the clean trajectory in data space.
template <typename T>
class TeacherNet : public TrajectoryNet<T> {
 public:
  TeacherNet(const NetConfig& cfg, std::uint64_t seed) : TrajectoryNet<T>(cfg, true, seed) {}
  TeacherNet(const NetConfig& cfg, ParameterSet<T> params) : TrajectoryNet<T>(cfg, true, std::move(params)) {}

  Var teacher_forward(Graph<T>& g, Var tau_t, std::span<const double> times, Var e_obs,
                      const Tensor<T>* keep = nullptr) {
    return this->forward(g, tau_t, e_obs, times, keep);
  }
};

// tau_psi(E_obs, z): one evaluation maps noise to a full trajectory.
template <typename T>
class StudentNet : public TrajectoryNet<T> {
 public:
  StudentNet(const NetConfig& cfg, std::uint64_t seed) : TrajectoryNet<T>(cfg, false, seed) {}
  StudentNet(const NetConfig& cfg, ParameterSet<T> params) : TrajectoryNet<T>(cfg, false, std::move(params)) {}

  Var student_forward(Graph<T>& g, Var z, Var e_obs) { return this->forward(g, z, e_obs, {}); }
};

// Parameter set of the teacher with every time-conditioning entry removed.
template <typename T>
ParameterSet<T> strip_time_conditioning(const ParameterSet<T>& teacher);

extern template class TrajectoryNet<float>;
extern template class TrajectoryNet<double>;

}  // namespace fd
