#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "flowdistill/tensor.hpp"

namespace fd {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  // Times a graph has bound this parameter.
  std::uint64_t reads = 0;
};

// Ordered, named parameter storage. Indices are stable once added.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> value);

  std::size_t size() const { return params_.size(); }
  bool empty() const { return params_.empty(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }

  std::optional<std::size_t> find(const std::string& name) const;
  Parameter<T>& at(const std::string& name);
  const Parameter<T>& at(const std::string& name) const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  std::uint64_t total_reads() const;
  std::size_t scalar_count() const;

  // Copy values from another set with an identical manifest (names and shapes).
  template <typename U>
  void assign_from(const ParameterSet<U>& other);

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<U>());
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
};

template <typename T>
template <typename U>
void ParameterSet<T>::assign_from(const ParameterSet<U>& other) {
  if (other.size() != params_.size()) {
    throw ShapeError("parameter set: size mismatch " + std::to_string(params_.size()) + " vs " +
                     std::to_string(other.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = other[i];
    auto& dst = params_[i];
    if (src.name != dst.name || src.value.shape() != dst.value.shape()) {
      throw ShapeError("parameter set: manifest mismatch at '" + dst.name + "' vs '" + src.name + "'");
    }
    for (std::size_t k = 0; k < dst.value.size(); ++k) dst.value[k] = static_cast<T>(src.value[k]);
  }
}

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;

}  // namespace fd
