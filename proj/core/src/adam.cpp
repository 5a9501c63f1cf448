#include "flowdistill/adam.hpp"

#include <cmath>

namespace fd {

template <typename T>
void adam_step(AdamState<T>& state, std::span<Tensor<T>* const> params, std::span<const Tensor<T>* const> grads) {
  if (params.size() != grads.size()) {
    throw ShapeError("adam: " + std::to_string(params.size()) + " parameters but " + std::to_string(grads.size()) +
                     " gradients");
  }
  if (state.first_moment.empty()) {
    for (const Tensor<T>* p : params) {
      state.first_moment.emplace_back(p->shape());
      state.second_moment.emplace_back(p->shape());
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i]->shape() || params[i]->shape() != state.first_moment[i].shape()) {
      throw ShapeError("adam: shape mismatch at parameter " + std::to_string(i) + ": " +
                       shape_str(params[i]->shape()) + " vs gradient " + shape_str(grads[i]->shape()));
    }
  }

  ++state.step;
  const auto& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const Tensor<T>& g = *grads[i];
    Tensor<T>& m = state.first_moment[i];
    Tensor<T>& v = state.second_moment[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      const double mhat = static_cast<double>(m[k]) / bc1;
      const double vhat = static_cast<double>(v[k]) / bc2;
      p[k] -= static_cast<T>(c.lr * mhat / (std::sqrt(vhat) + c.eps));
    }
  }
}

template <typename T>
void Adam<T>::step(std::span<ParameterSet<T>* const> sets) {
  std::vector<Tensor<T>*> params;
  std::vector<const Tensor<T>*> grads;
  for (ParameterSet<T>* set : sets) {
    for (auto& p : *set) {
      params.push_back(&p.value);
      grads.push_back(&p.grad);
    }
  }
  adam_step<T>(state_, params, grads);
}

template void adam_step<float>(AdamState<float>&, std::span<Tensor<float>* const>, std::span<const Tensor<float>* const>);
template void adam_step<double>(AdamState<double>&, std::span<Tensor<double>* const>,
                                std::span<const Tensor<double>* const>);
template class Adam<float>;
template class Adam<double>;

}  // namespace fd
