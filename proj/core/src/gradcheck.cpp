#include "flowdistill/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "flowdistill/rng.hpp"

namespace fd {

namespace {

double eval_loss(const LossBuilder& build) {
  Graph<double> g;
  Var loss = build(g);
  if (g.value(loss).size() != 1) throw ShapeError("gradcheck: builder returned a non-scalar loss");
  return g.value(loss).item();
}

}  // namespace

GradCheckResult finite_diff_check(const LossBuilder& build, std::span<ParameterSet<double>* const> params,
                                  const GradCheckOptions& options) {
  GradCheckResult result;
  for (auto* set : params) set->zero_grad();

  double base = 0.0;
  {
    Graph<double> g;
    Var loss = build(g);
    base = g.value(loss).item();
    g.backward(loss);
  }
  if (eval_loss(build) != base) throw Error("gradcheck: loss builder is not deterministic");

  Rng rng(options.seed);
  for (auto* set : params) {
    for (auto& p : *set) {
      const std::size_t n = p.value.size();
      std::vector<std::size_t> coords(n);
      std::iota(coords.begin(), coords.end(), std::size_t{0});
      if (options.max_entries_per_param > 0 && n > options.max_entries_per_param) {
        for (std::size_t i = 0; i < options.max_entries_per_param; ++i) {
          std::swap(coords[i], coords[i + rng.index(n - i)]);
        }
        coords.resize(options.max_entries_per_param);
      }
      double diff_sq = 0.0, fd_sq = 0.0;
      for (std::size_t k : coords) {
        const double orig = p.value[k];
        p.value[k] = orig + options.eps;
        const double up = eval_loss(build);
        p.value[k] = orig - options.eps;
        const double down = eval_loss(build);
        p.value[k] = orig;
        const double fd = (up - down) / (2.0 * options.eps);
        const double d = p.grad[k] - fd;
        diff_sq += d * d;
        fd_sq += fd * fd;
      }
      result.probed += coords.size();
      const double rel = std::sqrt(diff_sq) / (std::sqrt(fd_sq) + 1e-12);
      if (rel > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, rel);
        result.worst_param = p.name;
      }
    }
  }
  return result;
}

GradCheckResult finite_diff_check(const LossBuilder& build, ParameterSet<double>& params,
                                  const GradCheckOptions& options) {
  ParameterSet<double>* one[] = {&params};
  return finite_diff_check(build, one, options);
}

}  // namespace fd
