#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowdistill/cfm.hpp"

namespace fd {

// Symmetric set distance between (Ka, ...) and (Kb, ...): mean over A of the
// squared distance to the nearest member of B, plus the same from B to A.
// Members are compared as flattened vectors.
template <typename T>
double chamfer_distance(const Tensor<T>& a, const Tensor<T>& b);

// Differentiable version over `groups` independent set pairs stacked along
// axis 0 (a: groups*Ka rows, b: groups*Kb rows). Returns the mean over groups.
// Minima use hard assignment with ties going to the lowest index; gradients
// flow to both inputs through the selected pairs.
template <typename T>
Var chamfer(Graph<T>& g, Var a, Var b, std::size_t groups = 1);

// Nearest-member index per row under the same tie rule; used by metrics too.
template <typename T>
std::vector<std::size_t> nearest_members(const Tensor<T>& from, const Tensor<T>& to);

struct DistillMeta {
  std::size_t k = 16;
  std::size_t horizon = 32;
  std::size_t action_dim = 2;
  std::size_t obs_dim = 80;
  std::uint64_t seed = 0;
  std::string teacher_hash;
  OdeSamplerConfig sampler;
};

// Cached observation embeddings and teacher sets in task units.
struct DistillDataset {
  DistillMeta meta;
  std::vector<TensorF> e_obs;  // (obs_dim) each
  std::vector<TensorF> sets;   // (K, H, D) each

  std::size_t size() const { return sets.size(); }
  // First k members of every set; used for the K ablation.
  DistillDataset truncated(std::size_t k) const;
};

void validate(const DistillDataset& ds);

// Encodes every observation once and samples K trajectories per observation
// from the frozen teacher. Set i uses the stream derive_seed(seed, i).
DistillDataset build_distill_dataset(TeacherNet<float>& teacher, Encoder<float>& encoder,
                                     std::span<const RawObservation* const> observations, std::size_t k,
                                     const OdeSamplerConfig& sampler, std::uint64_t seed, std::string teacher_hash);

// Directory layout: meta.json plus obs_NNNNN.tset and obs_NNNNN.eobs.
void save_distill_dataset(const std::filesystem::path& dir, const DistillDataset& ds);
// Throws if expected_hash is non-empty and differs from the stored teacher hash.
DistillDataset load_distill_dataset(const std::filesystem::path& dir, const std::string& expected_hash = "");

// "EOBS": magic, version, length, then f32 payload.
std::vector<std::uint8_t> encode_eobs(const TensorF& e);
TensorF decode_eobs(std::vector<std::uint8_t> bytes, const std::string& what = "EOBS");

struct StudentTrainConfig {
  std::size_t epochs = 300;
  std::size_t batch = 16;  // observations per step
  double lr = 1e-3;
  double lr_final = 1e-4;
  std::uint64_t seed = 0;
  std::size_t patience = 0;
  double min_delta = 1e-4;
  std::filesystem::path log_csv;
};

// Set-level IMLE: per observation and epoch, K fresh noise draws produce K
// hypotheses, matched to the teacher set with the Chamfer distance.
TrainLog imle_train_student(const DistillDataset& ds, StudentNet<float>& student, const StudentTrainConfig& cfg);

// K one-step samples for one embedding; sample k uses derive_seed(seed, k).
// Result (K, H, D) in task units.
TensorF student_sample_set(StudentNet<float>& student, std::span<const float> e_obs, std::size_t k,
                           std::uint64_t seed);

}  // namespace fd
