#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "flowdistill/params.hpp"

namespace fd {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moments are lazily shaped on the first step.
template <typename T>
struct AdamState {
  AdamConfig config;
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update applied in place.
template <typename T>
void adam_step(AdamState<T>& state, std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads);

// Convenience wrapper that walks several parameter sets as one sequence.
template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig config) { state_.config = config; }

  void step(std::span<ParameterSet<T>* const> sets);
  void step(ParameterSet<T>& set) {
    ParameterSet<T>* one[] = {&set};
    step(one);
  }

  const AdamState<T>& state() const { return state_; }
  void set_lr(double lr) { state_.config.lr = lr; }

 private:
  AdamState<T> state_;
};

extern template void adam_step<float>(AdamState<float>&, std::span<Tensor<float>* const>,
                                      std::span<const Tensor<float>* const>);
extern template void adam_step<double>(AdamState<double>&, std::span<Tensor<double>* const>,
                                       std::span<const Tensor<double>* const>);
extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace fd
