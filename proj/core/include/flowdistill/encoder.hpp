#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "flowdistill/graph.hpp"
#include "flowdistill/rng.hpp"

namespace fd {

struct EncoderConfig {
  std::size_t d_tok = 32;  // token width; also the width of h_vis
  std::size_t n_app = 16;  // appearance tokens
  std::size_t n_geo = 16;  // geometry tokens
  std::size_t n_points = 32;
  std::size_t d_proprio = 2;
  std::size_t d_pcd = 32;
  std::size_t d_state = 16;
  std::size_t gate_hidden = 32;
  std::size_t point_hidden = 32;
  std::size_t state_hidden = 32;

  std::size_t obs_dim() const { return d_tok + d_pcd + d_state; }
};

void validate(const EncoderConfig& cfg);

// Toy multimodal observation. Points are (x, y, label).
struct RawObservation {
  TensorF appearance;  // (n_app, d_tok)
  TensorF geometry;    // (n_geo, d_tok)
  TensorF points;      // (n_points, 3)
  TensorF proprio;     // (d_proprio)
};

void validate(const EncoderConfig& cfg, const RawObservation& obs);

// Observations stacked along a leading batch axis.
template <typename T>
struct ObsBatch {
  Tensor<T> appearance, geometry, points, proprio;
  std::size_t size() const { return proprio.rank() ? proprio.dim(0) : 0; }
};

template <typename T>
ObsBatch<T> stack_observations(const EncoderConfig& cfg, std::span<const RawObservation* const> obs);

// Fixed random projections from rasters to tokens. Rasters are square grids
// cut into square patches; one token per patch plus a fixed positional code.
struct FeaturizerConfig {
  std::size_t grid = 16;
  std::size_t patch = 4;
  std::uint64_t seed = 0x5eed;
};

class Featurizer {
 public:
  Featurizer(const EncoderConfig& enc, const FeaturizerConfig& cfg = {});

  // occupancy and goal are grid*grid row-major rasters.
  TensorF appearance_tokens(std::span<const float> occupancy, std::span<const float> goal) const;
  // Signed distance samples on the same grid.
  TensorF geometry_tokens(std::span<const float> sdf) const;

  const FeaturizerConfig& config() const { return cfg_; }
  std::size_t tokens() const { return (cfg_.grid / cfg_.patch) * (cfg_.grid / cfg_.patch); }

 private:
  TensorF project(std::span<const std::span<const float>> channels, const TensorF& proj, const TensorF& pos) const;

  FeaturizerConfig cfg_;
  std::size_t d_tok_;
  TensorF app_proj_, geo_proj_, app_pos_, geo_pos_;
};

enum class AttnDirection { kAppearanceQueries, kGeometryQueries };

template <typename T>
struct EncodedObs {
  Var e_obs;  // (B, obs_dim), order [h_vis, h_pcd, h_state]
  Var alpha;  // (B, 2), [appearance, geometry]
  Var h_vis, h_pcd, h_state;
};

// Bi-directional cross-attention fusion, gated visual pooling, point-set and
// state encoders. Batched over a leading axis throughout.
template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, std::uint64_t seed);
  Encoder(const EncoderConfig& cfg, ParameterSet<T> params);

  // queries + softmax(Q K^T / sqrt(d)) V with Q, K, V single-head projections.
  // weights, if given, receives the (B, Nq, Nk) attention matrix.
  Var cross_attend(Graph<T>& g, Var queries, Var keys_values, AttnDirection dir, Var* weights = nullptr);
  // Returns h_vis (B, d_tok) and alpha (B, 2).
  std::pair<Var, Var> fuse_visual(Graph<T>& g, Var f_rgb, Var f_depth);
  Var encode_points(Graph<T>& g, Var points);
  Var encode_state(Graph<T>& g, Var proprio);
  EncodedObs<T> assemble(Graph<T>& g, const ObsBatch<T>& batch);

  const EncoderConfig& config() const { return cfg_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }

 private:
  struct Attn {
    std::size_t q, k, v;
  };
  struct Mlp {
    std::size_t w1, b1, w2, b2;
  };

  void build_manifest(Rng* rng);
  std::size_t add_param(const std::string& name, Shape shape, double stddev, Rng* rng);
  Mlp add_mlp(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out, bool zero_last, Rng* rng);
  Var run_mlp(Graph<T>& g, const Mlp& m, Var x);

  EncoderConfig cfg_;
  ParameterSet<T> params_;
  Attn attn_app_{}, attn_geo_{};
  Mlp gate_{}, points_{}, state_{};
};

// Evaluates E_obs for observations without recording gradients.
TensorF encode_observations(Encoder<float>& enc, std::span<const RawObservation* const> obs,
                            TensorF* alpha = nullptr);

extern template class Encoder<float>;
extern template class Encoder<double>;

}  // namespace fd
