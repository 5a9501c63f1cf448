#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "flowdistill/params.hpp"
#include "flowdistill/tensor.hpp"

namespace fd {

enum class OpKind {
  kLeaf,
  kMatmul,
  kAdd,
  kMul,
  kScale,
  kSum,
  kMean,
  kConcat,
  kSlice,
  kTranspose,
  kRelu,
  kGelu,
  kTanh,
  kSigmoid,
  kSoftmax,
  kLayerNorm,
  kSquaredError,
  kReshape,
  kBatchMatmul,
  kConv1d,
  kUpsample2,
  kFilm,
  kRowScale,
  kMeanTokens,
  kMaxTokens,
  kCustom,
};

std::string_view op_name(OpKind kind);

// Handle to a node of one Graph. Only meaningful together with its graph.
struct Var {
  std::uint32_t id = 0;
};

// Attributes for ops that need more than their inputs.
struct OpAttrs {
  double factor = 1.0;     // scale
  std::size_t axis = 0;    // concat, slice
  std::size_t begin = 0;   // slice
  std::size_t end = 0;     // slice
  std::size_t stride = 1;  // conv1d
  Shape shape;             // reshape
};

// Eagerly evaluated computation with a tape for reverse-mode gradients.
//
// Every op computes its value at record time and throws if the result is not
// finite. backward() may run once per graph; parameter gradients accumulate into
// the bound ParameterSet entries.
template <typename T>
class Graph {
 public:
  // Receives d(loss)/d(output) and adds into d(loss)/d(input_i); entries are
  // null for inputs that do not need a gradient.
  using BackwardFn = std::function<void(const Tensor<T>& out_grad, std::span<Tensor<T>* const> in_grads)>;

  Graph() = default;
  // With tracking off, parameters bind as plain constants: no gradients, no tape captures.
  explicit Graph(bool track_grad) : track_grad_(track_grad) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> value);
  // Leaf whose gradient is kept and readable via grad() after backward().
  Var input(Tensor<T> value);
  Var param(Parameter<T>& p);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape(); }
  const Tensor<T>& grad(Var v) const;
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Generic entry point; the typed helpers below forward here.
  Var record(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var sum(Var a);
  Var mean(Var a);
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
  Var transpose(Var a);
  Var relu(Var a);
  Var gelu(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var softmax(Var a);
  Var layernorm(Var x, Var gamma, Var beta);
  Var squared_error(Var pred, Var target);
  Var reshape(Var a, Shape shape);
  Var bmm(Var a, Var b);
  Var conv1d(Var x, Var weight, Var bias, std::size_t stride = 1);
  Var upsample2(Var x);
  Var film(Var x, Var gamma, Var beta);
  Var rowscale(Var x, Var s);
  Var mean_tokens(Var x);
  Var max_tokens(Var x);

  Var linear(Var x, Var weight, Var bias) { return add(matmul(x, weight), bias); }

  Var custom(Tensor<T> value, std::span<const Var> inputs, BackwardFn backward);

  void backward(Var loss);

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    bool keep_grad = false;
  };

  Var push(OpKind kind, Tensor<T> value, std::span<const Var> inputs, BackwardFn backward);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
  bool track_grad_ = true;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace fd
