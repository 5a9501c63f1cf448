#include "flowdistill/params.hpp"

namespace fd {

template <typename T>
std::size_t ParameterSet<T>::add(std::string name, Tensor<T> value) {
  if (find(name)) throw Error("parameter set: duplicate name '" + name + "'");
  Tensor<T> grad(value.shape());
  params_.push_back({std::move(name), std::move(value), std::move(grad)});
  return params_.size() - 1;
}

template <typename T>
std::optional<std::size_t> ParameterSet<T>::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  return std::nullopt;
}

template <typename T>
Parameter<T>& ParameterSet<T>::at(const std::string& name) {
  auto idx = find(name);
  if (!idx) throw Error("parameter set: no parameter named '" + name + "'");
  return params_[*idx];
}

template <typename T>
const Parameter<T>& ParameterSet<T>::at(const std::string& name) const {
  auto idx = find(name);
  if (!idx) throw Error("parameter set: no parameter named '" + name + "'");
  return params_[*idx];
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p.grad.fill(T(0));
}

template <typename T>
std::uint64_t ParameterSet<T>::total_reads() const {
  std::uint64_t n = 0;
  for (const auto& p : params_) n += p.reads;
  return n;
}

template <typename T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template class ParameterSet<float>;
template class ParameterSet<double>;

}  // namespace fd
