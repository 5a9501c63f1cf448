#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowdistill/policy.hpp"
#include "flowdistill/tasks.hpp"

namespace fd {

// Euclidean distance between two flattened trajectories.
double traj_distance(std::span<const float> a, std::span<const float> b);

// Expert statistics for one observation: per-mode demo pools, centroids and
// the membership threshold delta (99th percentile of demo-to-own-centroid
// distances over all modes).
struct ModeReference {
  std::size_t modes = 0;
  std::size_t per_mode = 0;
  TensorF pool;       // (modes * per_mode, H, D), mode-major
  TensorF centroids;  // (modes, H, D)
  double delta = 0.0;

  std::span<const float> member(std::size_t mode, std::size_t i) const;
  std::span<const float> centroid(std::size_t mode) const;
};

ModeReference build_mode_reference(const TaskSpec& task, const Scene& scene, const EpisodeState& state,
                                   std::size_t per_mode, std::uint64_t seed, double percentile = 0.99);

// Index of the nearest centroid for each member of the set.
std::vector<std::size_t> classify_modes(const TensorF& set, const ModeReference& ref);

// Share of modes hit. A mode is hit when, among the members classified to it,
// the closest to its centroid lies within delta.
double mode_coverage(const TensorF& set, const ModeReference& ref);

// Share of members whose nearest pool trajectory is within delta.
double mode_fidelity(const TensorF& set, const TensorF& pool, double delta);

// Mean pairwise distance among the K members; K >= 2.
double collapse_score(const TensorF& set);

struct ConfidenceInterval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

// Percentile bootstrap of the mean.
ConfidenceInterval bootstrap_mean_ci(std::span<const double> values, std::size_t resamples = 1000,
                                     std::uint64_t seed = 0, double level = 0.95);

struct InferenceStats {
  double median_ms = 0.0;
  double p10_ms = 0.0;
  double p90_ms = 0.0;
  double nfe_per_chunk = 0.0;
  double hz = 0.0;
  std::size_t repeats = 0;
};

// Times single-sample chunk generation after warmup; the NFE count is exact.
InferenceStats measure_inference(Policy& policy, std::span<const float> e_obs, std::size_t repeats,
                                 std::size_t warmup = 5);

struct ObsMetrics {
  std::size_t obs_id = 0;
  double coverage = 0.0;
  double fidelity = 0.0;
  double collapse = 0.0;
  double collapse_norm = 0.0;  // relative to the reference set
  double chamfer_to_expert = 0.0;
  double delta = 0.0;
};

struct EvalReport {
  std::string policy;
  std::vector<ObsMetrics> rows;
  ConfidenceInterval coverage, fidelity, collapse, collapse_norm, chamfer_to_expert;
  InferenceStats timing;
  bool has_timing = false;
  // Share of observations with full coverage.
  double full_coverage_rate = 0.0;

  void aggregate(std::size_t resamples = 1000, std::uint64_t seed = 0);
};

// One row per observation.
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
// Aggregates with 95% intervals plus timing.
void write_report_json(const std::filesystem::path& path, const EvalReport& report);

}  // namespace fd
