#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include "flowdistill/graph.hpp"

namespace fd {

struct GradCheckOptions {
  double eps = 1e-4;
  // Coordinates probed per parameter tensor; 0 probes all of them.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t probed = 0;
};

// Builds the scalar loss from the bound parameters; must be deterministic.
using LossBuilder = std::function<Var(Graph<double>&)>;

// Compares reverse-mode gradients against central differences in 64-bit.
//
// Error per parameter tensor is ||analytic - fd|| / (||fd|| + 1e-12) over the
// probed coordinates; the result is the maximum over tensors.
GradCheckResult finite_diff_check(const LossBuilder& build, std::span<ParameterSet<double>* const> params,
                                  const GradCheckOptions& options = {});

GradCheckResult finite_diff_check(const LossBuilder& build, ParameterSet<double>& params,
                                  const GradCheckOptions& options = {});

}  // namespace fd
