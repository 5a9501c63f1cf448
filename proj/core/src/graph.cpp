#include "flowdistill/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <unsupported/Eigen/SpecialFunctions>

#include "linalg.hpp"

namespace fd {

namespace {

[[noreturn]] void shape_fail(OpKind kind, const Shape& a, const Shape& b, std::string_view what = "incompatible shapes") {
  throw ShapeError(std::string(op_name(kind)) + ": " + std::string(what) + " " + shape_str(a) + " vs " + shape_str(b));
}

[[noreturn]] void arity_fail(OpKind kind, std::size_t expected, std::size_t got) {
  throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(expected) + " inputs, got " +
                   std::to_string(got));
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

template <typename T>
void add_into(Tensor<T>* dst, const Tensor<T>& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "elementwise-mul";
    case OpKind::kScale: return "scalar-scale";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kRelu: return "relu";
    case OpKind::kGelu: return "gelu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmax: return "softmax-lastdim";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kSquaredError: return "squared-error";
    case OpKind::kReshape: return "reshape";
    case OpKind::kBatchMatmul: return "batch-matmul";
    case OpKind::kConv1d: return "conv1d";
    case OpKind::kUpsample2: return "upsample2";
    case OpKind::kFilm: return "film";
    case OpKind::kRowScale: return "rowscale";
    case OpKind::kMeanTokens: return "mean-tokens";
    case OpKind::kMaxTokens: return "max-tokens";
    case OpKind::kCustom: return "custom";
  }
  return "unknown";
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::node(Var v) const {
  if (v.id >= nodes_.size()) throw Error("graph: variable does not belong to this graph");
  return nodes_[v.id];
}

template <typename T>
Var Graph<T>::push(OpKind kind, Tensor<T> value, std::span<const Var> inputs, BackwardFn backward) {
  if (consumed_) throw Error("graph: cannot record after backward()");
  if (!value.all_finite()) {
    throw NonFiniteError(std::string(op_name(kind)) + ": produced a non-finite value, shape " +
                         shape_str(value.shape()));
  }
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (Var in : inputs) {
    const Node& src = node(in);
    n.inputs.push_back(in.id);
    n.needs_grad = n.needs_grad || src.needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  return push(OpKind::kLeaf, std::move(value), {}, nullptr);
}

template <typename T>
Var Graph<T>::input(Tensor<T> value) {
  Var v = push(OpKind::kLeaf, std::move(value), {}, nullptr);
  nodes_[v.id].needs_grad = true;
  nodes_[v.id].keep_grad = true;
  return v;
}

template <typename T>
Var Graph<T>::param(Parameter<T>& p) {
  Var v = push(OpKind::kLeaf, p.value, {}, nullptr);
  ++p.reads;
  if (!track_grad_) return v;
  nodes_[v.id].needs_grad = true;
  nodes_[v.id].param = &p;
  return v;
}

template <typename T>
const Tensor<T>& Graph<T>::grad(Var v) const {
  const Node& n = node(v);
  if (!n.keep_grad) throw Error("graph: gradient is only retained for input() leaves");
  if (!consumed_) throw Error("graph: grad() before backward()");
  return n.grad;
}

template <typename T>
Var Graph<T>::custom(Tensor<T> value, std::span<const Var> inputs, BackwardFn backward) {
  return push(OpKind::kCustom, std::move(value), inputs, std::move(backward));
}

template <typename T>
Var Graph<T>::record(OpKind kind, std::span<const Var> in, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) arity_fail(kind, n, in.size());
  };

  switch (kind) {
    case OpKind::kMatmul: {
      need(2);
      const Tensor<T>& a = value(in[0]);
      const Tensor<T>& b = value(in[1]);
      if (b.rank() != 2 || a.rank() < 1 || a.shape().back() != b.dim(0)) shape_fail(kind, a.shape(), b.shape());
      const std::size_t k = b.dim(0), n = b.dim(1), m = a.size() / k;
      Shape out_shape = a.shape();
      out_shape.back() = n;
      Tensor<T> out(out_shape);
      detail::gemm_acc(a.ptr(), b.ptr(), out.ptr(), m, k, n, false, false);
      Tensor<T> a_copy = node(in[1]).needs_grad ? a : Tensor<T>();
      Tensor<T> b_copy = node(in[0]).needs_grad ? b : Tensor<T>();
      return push(kind, std::move(out), in, [a_copy, b_copy, m, k, n](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        if (gi[0]) detail::gemm_acc(g.ptr(), b_copy.ptr(), gi[0]->ptr(), m, n, k, false, true);
        if (gi[1]) detail::gemm_acc(a_copy.ptr(), g.ptr(), gi[1]->ptr(), k, m, n, true, false);
      });
    }
    case OpKind::kAdd: {
      need(2);
      const Tensor<T>& a = value(in[0]);
      const Tensor<T>& b = value(in[1]);
      Tensor<T> out = a;
      if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
        return push(kind, std::move(out), in, [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
          add_into(gi[0], g);
          add_into(gi[1], g);
        });
      }
      if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) {
        const std::size_t c = b.dim(0);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
        return push(kind, std::move(out), in, [c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
          add_into(gi[0], g);
          if (gi[1]) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i % c] += g[i];
          }
        });
      }
      shape_fail(kind, a.shape(), b.shape());
    }
    case OpKind::kMul: {
      need(2);
      const Tensor<T>& a = value(in[0]);
      const Tensor<T>& b = value(in[1]);
      if (a.shape() != b.shape()) shape_fail(kind, a.shape(), b.shape());
      Tensor<T> out = a;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
      Tensor<T> a_copy = node(in[1]).needs_grad ? a : Tensor<T>();
      Tensor<T> b_copy = node(in[0]).needs_grad ? b : Tensor<T>();
      return push(kind, std::move(out), in, [a_copy, b_copy](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * b_copy[i];
        if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * a_copy[i];
      });
    }
    case OpKind::kScale: {
      need(1);
      const T f = static_cast<T>(attrs.factor);
      Tensor<T> out = value(in[0]);
      for (auto& v : out.data()) v *= f;
      return push(kind, std::move(out), in, [f](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += f * g[i];
      });
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      need(1);
      const Tensor<T>& a = value(in[0]);
      if (a.empty()) throw ShapeError(std::string(op_name(kind)) + ": empty input");
      T acc = 0;
      for (T v : a.data()) acc += v;
      const T w = kind == OpKind::kMean ? T(1) / static_cast<T>(a.size()) : T(1);
      return push(kind, Tensor<T>::scalar(acc * w), in, [w](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        const T d = g[0] * w;
        for (auto& v : gi[0]->data()) v += d;
      });
    }
    case OpKind::kConcat: {
      if (in.empty()) arity_fail(kind, 1, 0);
      const Shape& s0 = shape(in[0]);
      const std::size_t axis = attrs.axis;
      if (axis >= s0.size()) shape_fail(kind, s0, s0, "axis out of range for");
      std::vector<std::size_t> widths;
      Shape out_shape = s0;
      out_shape[axis] = 0;
      for (Var v : in) {
        const Shape& s = shape(v);
        if (s.size() != s0.size()) shape_fail(kind, s0, s);
        for (std::size_t d = 0; d < s.size(); ++d) {
          if (d != axis && s[d] != s0[d]) shape_fail(kind, s0, s);
        }
        out_shape[axis] += s[axis];
        widths.push_back(s[axis]);
      }
      const std::size_t outer = prod(s0, 0, axis), inner = prod(s0, axis + 1, s0.size());
      const std::size_t total = out_shape[axis];
      Tensor<T> out(out_shape);
      std::size_t offset = 0;
      for (std::size_t p = 0; p < in.size(); ++p) {
        const Tensor<T>& src = value(in[p]);
        const std::size_t block = widths[p] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy_n(src.ptr() + o * block, block, out.ptr() + (o * total + offset) * inner);
        }
        offset += widths[p];
      }
      return push(kind, std::move(out), in, [widths, outer, inner, total](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          const std::size_t block = widths[p] * inner;
          if (gi[p]) {
            for (std::size_t o = 0; o < outer; ++o) {
              const T* src = g.ptr() + (o * total + off) * inner;
              T* dst = gi[p]->ptr() + o * block;
              for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
            }
          }
          off += widths[p];
        }
      });
    }
    case OpKind::kSlice: {
      need(1);
      const Shape& s = shape(in[0]);
      const std::size_t axis = attrs.axis, b = attrs.begin, e = attrs.end;
      if (axis >= s.size() || b >= e || e > s[axis]) {
        throw ShapeError("slice: range [" + std::to_string(b) + "," + std::to_string(e) + ") on axis " +
                         std::to_string(axis) + " invalid for shape " + shape_str(s));
      }
      Shape out_shape = s;
      out_shape[axis] = e - b;
      const std::size_t outer = prod(s, 0, axis), inner = prod(s, axis + 1, s.size());
      const std::size_t full = s[axis], width = e - b;
      Tensor<T> out(out_shape);
      const Tensor<T>& src = value(in[0]);
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(src.ptr() + (o * full + b) * inner, width * inner, out.ptr() + o * width * inner);
      }
      return push(kind, std::move(out), in, [outer, inner, full, width, b](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = g.ptr() + o * width * inner;
          T* dst = gi[0]->ptr() + (o * full + b) * inner;
          for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
        }
      });
    }
    case OpKind::kTranspose: {
      need(1);
      const Shape& s = shape(in[0]);
      if (s.size() < 2) shape_fail(kind, s, s, "needs rank >= 2, got");
      const std::size_t r = s[s.size() - 2], c = s[s.size() - 1], batch = prod(s, 0, s.size() - 2);
      Shape out_shape = s;
      std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
      Tensor<T> out(out_shape);
      const Tensor<T>& src = value(in[0]);
      for (std::size_t bi = 0; bi < batch; ++bi) {
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) out[bi * r * c + j * r + i] = src[bi * r * c + i * c + j];
        }
      }
      return push(kind, std::move(out), in, [batch, r, c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t bi = 0; bi < batch; ++bi) {
          for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) (*gi[0])[bi * r * c + i * c + j] += g[bi * r * c + j * r + i];
          }
        }
      });
    }
    case OpKind::kRelu:
    case OpKind::kGelu:
    case OpKind::kTanh:
    case OpKind::kSigmoid: {
      need(1);
      const Tensor<T>& x = value(in[0]);
      const bool grad = node(in[0]).needs_grad;
      const std::size_t n = x.size();
      Tensor<T> out(x.shape());
      Tensor<T> deriv = grad ? Tensor<T>(x.shape()) : Tensor<T>();
      const T* xp = x.ptr();
      T* yp = out.ptr();
      T* dp = grad ? deriv.ptr() : nullptr;
      switch (kind) {
        case OpKind::kRelu:
          for (std::size_t i = 0; i < n; ++i) yp[i] = xp[i] > T(0) ? xp[i] : T(0);
          if (dp) for (std::size_t i = 0; i < n; ++i) dp[i] = xp[i] > T(0) ? T(1) : T(0);
          break;
        case OpKind::kGelu: {
          using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
          const auto ni = static_cast<Eigen::Index>(n);
          // Aligned copy: Eigen's packet and scalar erf differ in the last bit, and a
          // raw pointer's alignment would decide which elements take which path.
          const Arr xv = Eigen::Map<const Arr>(xp, ni);
          const Arr cdf = T(0.5) * (T(1) + (xv * (T(1) / std::numbers::sqrt2_v<T>)).erf());
          Eigen::Map<Arr>(yp, ni) = xv * cdf;
          if (dp) {
            const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
            Eigen::Map<Arr>(dp, ni) = cdf + xv * (T(-0.5) * xv.square()).exp() * inv_sqrt2pi;
          }
          break;
        }
        case OpKind::kTanh:
          for (std::size_t i = 0; i < n; ++i) yp[i] = std::tanh(xp[i]);
          if (dp) for (std::size_t i = 0; i < n; ++i) dp[i] = T(1) - yp[i] * yp[i];
          break;
        default:
          for (std::size_t i = 0; i < n; ++i) yp[i] = T(1) / (T(1) + std::exp(-xp[i]));
          if (dp) for (std::size_t i = 0; i < n; ++i) dp[i] = yp[i] * (T(1) - yp[i]);
          break;
      }
      return push(kind, std::move(out), in, [deriv = std::move(deriv)](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * deriv[i];
      });
    }
    case OpKind::kSoftmax: {
      need(1);
      const Tensor<T>& x = value(in[0]);
      if (x.rank() < 1 || x.shape().back() == 0) shape_fail(kind, x.shape(), x.shape(), "needs a nonempty last dim,");
      const std::size_t c = x.shape().back(), rows = x.size() / c;
      Tensor<T> out(x.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * c;
        T* yr = out.ptr() + r * c;
        const T mx = *std::max_element(xr, xr + c);
        T z = 0;
        for (std::size_t j = 0; j < c; ++j) z += (yr[j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < c; ++j) yr[j] /= z;
      }
      Tensor<T> y = out;
      return push(kind, std::move(out), in, [y, c, rows](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
          for (std::size_t j = 0; j < c; ++j) (*gi[0])[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
        }
      });
    }
    case OpKind::kLayerNorm: {
      need(3);
      const Tensor<T>& x = value(in[0]);
      const Tensor<T>& gamma = value(in[1]);
      const Tensor<T>& beta = value(in[2]);
      if (x.rank() < 1 || gamma.rank() != 1 || beta.shape() != gamma.shape() || gamma.dim(0) != x.shape().back()) {
        shape_fail(kind, x.shape(), gamma.shape());
      }
      const std::size_t c = gamma.dim(0), rows = x.size() / c;
      const T eps = T(1e-5);
      Tensor<T> out(x.shape()), xhat(x.shape());
      std::vector<T> inv_std(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + r * c;
        T mu = 0, var = 0;
        for (std::size_t j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<T>(c);
        for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<T>(c);
        inv_std[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
          xhat[r * c + j] = (xr[j] - mu) * inv_std[r];
          out[r * c + j] = xhat[r * c + j] * gamma[j] + beta[j];
        }
      }
      Tensor<T> gamma_copy = gamma;
      return push(kind, std::move(out), in,
                  [xhat, inv_std, gamma_copy, c, rows](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                    for (std::size_t r = 0; r < rows; ++r) {
                      T sum_dxh = 0, sum_dxh_xh = 0;
                      for (std::size_t j = 0; j < c; ++j) {
                        const std::size_t i = r * c + j;
                        const T dxh = g[i] * gamma_copy[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[i];
                        if (gi[1]) (*gi[1])[j] += g[i] * xhat[i];
                        if (gi[2]) (*gi[2])[j] += g[i];
                      }
                      if (gi[0]) {
                        const T n = static_cast<T>(c);
                        for (std::size_t j = 0; j < c; ++j) {
                          const std::size_t i = r * c + j;
                          const T dxh = g[i] * gamma_copy[j];
                          (*gi[0])[i] += inv_std[r] / n * (n * dxh - sum_dxh - xhat[i] * sum_dxh_xh);
                        }
                      }
                    }
                  });
    }
    case OpKind::kSquaredError: {
      need(2);
      const Tensor<T>& p = value(in[0]);
      const Tensor<T>& t = value(in[1]);
      if (p.shape() != t.shape() || p.empty()) shape_fail(kind, p.shape(), t.shape());
      Tensor<T> diff(p.shape());
      T acc = 0;
      for (std::size_t i = 0; i < p.size(); ++i) {
        diff[i] = p[i] - t[i];
        acc += diff[i] * diff[i];
      }
      const T inv_n = T(1) / static_cast<T>(p.size());
      return push(kind, Tensor<T>::scalar(acc * inv_n), in, [diff, inv_n](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        const T w = T(2) * g[0] * inv_n;
        if (gi[0]) for (std::size_t i = 0; i < diff.size(); ++i) (*gi[0])[i] += w * diff[i];
        if (gi[1]) for (std::size_t i = 0; i < diff.size(); ++i) (*gi[1])[i] -= w * diff[i];
      });
    }
    case OpKind::kReshape: {
      need(1);
      const Shape& s = shape(in[0]);
      if (shape_numel(attrs.shape) != shape_numel(s)) shape_fail(kind, s, attrs.shape);
      return push(kind, value(in[0]).reshaped(attrs.shape), in, [](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
      });
    }
    case OpKind::kBatchMatmul: {
      need(2);
      const Tensor<T>& a = value(in[0]);
      const Tensor<T>& b = value(in[1]);
      if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        shape_fail(kind, a.shape(), b.shape());
      }
      const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
      Tensor<T> out({bs, m, n});
      for (std::size_t i = 0; i < bs; ++i) {
        detail::gemm_acc(a.ptr() + i * m * k, b.ptr() + i * k * n, out.ptr() + i * m * n, m, k, n, false, false);
      }
      Tensor<T> a_copy = node(in[1]).needs_grad ? a : Tensor<T>();
      Tensor<T> b_copy = node(in[0]).needs_grad ? b : Tensor<T>();
      return push(kind, std::move(out), in, [a_copy, b_copy, bs, m, k, n](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t i = 0; i < bs; ++i) {
          const T* gp = g.ptr() + i * m * n;
          if (gi[0]) detail::gemm_acc(gp, b_copy.ptr() + i * k * n, gi[0]->ptr() + i * m * k, m, n, k, false, true);
          if (gi[1]) detail::gemm_acc(a_copy.ptr() + i * m * k, gp, gi[1]->ptr() + i * k * n, k, m, n, true, false);
        }
      });
    }
    case OpKind::kConv1d: {
      need(3);
      const Tensor<T>& x = value(in[0]);
      const Tensor<T>& w = value(in[1]);
      const Tensor<T>& bias = value(in[2]);
      const std::size_t stride = attrs.stride;
      if (x.rank() != 3 || w.rank() != 3 || w.dim(1) != x.dim(2) || w.dim(0) % 2 == 0 || bias.rank() != 1 ||
          bias.dim(0) != w.dim(2) || stride == 0) {
        shape_fail(kind, x.shape(), w.shape());
      }
      const std::size_t bs = x.dim(0), len = x.dim(1), cin = x.dim(2);
      const std::size_t ks = w.dim(0), cout = w.dim(2), pad = ks / 2;
      const std::size_t out_len = (len + 2 * pad - ks) / stride + 1;
      const std::size_t row = ks * cin;
      AlignedVector<T> cols(bs * out_len * row, T(0));
      for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t o = 0; o < out_len; ++o) {
          T* dst = cols.data() + (b * out_len + o) * row;
          for (std::size_t j = 0; j < ks; ++j) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(o * stride + j) - static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
            std::copy_n(x.ptr() + (b * len + static_cast<std::size_t>(src)) * cin, cin, dst + j * cin);
          }
        }
      }
      Tensor<T> out({bs, out_len, cout});
      const std::size_t m = bs * out_len;
      for (std::size_t i = 0; i < m; ++i) std::copy_n(bias.ptr(), cout, out.ptr() + i * cout);
      detail::gemm_acc(cols.data(), w.ptr(), out.ptr(), m, row, cout, false, false);
      Tensor<T> w_copy = node(in[0]).needs_grad ? w : Tensor<T>();
      return push(kind, std::move(out), in,
                  [cols = std::move(cols), w_copy, bs, len, cin, ks, cout, pad, stride, out_len, row, m](
                      const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
                    if (gi[1]) detail::gemm_acc(cols.data(), g.ptr(), gi[1]->ptr(), row, m, cout, true, false);
                    if (gi[2]) {
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t c = 0; c < cout; ++c) (*gi[2])[c] += g[i * cout + c];
                      }
                    }
                    if (gi[0]) {
                      AlignedVector<T> dcols(m * row, T(0));
                      detail::gemm_acc(g.ptr(), w_copy.ptr(), dcols.data(), m, cout, row, false, true);
                      for (std::size_t b = 0; b < bs; ++b) {
                        for (std::size_t o = 0; o < out_len; ++o) {
                          const T* src = dcols.data() + (b * out_len + o) * row;
                          for (std::size_t j = 0; j < ks; ++j) {
                            const std::ptrdiff_t xi =
                                static_cast<std::ptrdiff_t>(o * stride + j) - static_cast<std::ptrdiff_t>(pad);
                            if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(len)) continue;
                            T* dst = gi[0]->ptr() + (b * len + static_cast<std::size_t>(xi)) * cin;
                            for (std::size_t c = 0; c < cin; ++c) dst[c] += src[j * cin + c];
                          }
                        }
                      }
                    }
                  });
    }
    case OpKind::kUpsample2: {
      need(1);
      const Tensor<T>& x = value(in[0]);
      if (x.rank() != 3) shape_fail(kind, x.shape(), x.shape(), "needs rank 3, got");
      const std::size_t bs = x.dim(0), len = x.dim(1), c = x.dim(2);
      Tensor<T> out({bs, 2 * len, c});
      for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t l = 0; l < 2 * len; ++l) {
          std::copy_n(x.ptr() + (b * len + l / 2) * c, c, out.ptr() + (b * 2 * len + l) * c);
        }
      }
      return push(kind, std::move(out), in, [bs, len, c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t b = 0; b < bs; ++b) {
          for (std::size_t l = 0; l < 2 * len; ++l) {
            const T* src = g.ptr() + (b * 2 * len + l) * c;
            T* dst = gi[0]->ptr() + (b * len + l / 2) * c;
            for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
          }
        }
      });
    }
    case OpKind::kFilm: {
      need(3);
      const Tensor<T>& x = value(in[0]);
      const Tensor<T>& gamma = value(in[1]);
      const Tensor<T>& beta = value(in[2]);
      if (x.rank() != 3 || gamma.rank() != 2 || gamma.shape() != beta.shape() || gamma.dim(0) != x.dim(0) ||
          gamma.dim(1) != x.dim(2)) {
        shape_fail(kind, x.shape(), gamma.shape());
      }
      const std::size_t bs = x.dim(0), len = x.dim(1), c = x.dim(2);
      Tensor<T> out(x.shape());
      for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t l = 0; l < len; ++l) {
          for (std::size_t k = 0; k < c; ++k) {
            const std::size_t i = (b * len + l) * c + k;
            out[i] = x[i] * (T(1) + gamma[b * c + k]) + beta[b * c + k];
          }
        }
      }
      Tensor<T> x_copy = node(in[1]).needs_grad ? x : Tensor<T>();
      Tensor<T> gamma_copy = node(in[0]).needs_grad ? gamma : Tensor<T>();
      return push(kind, std::move(out), in, [x_copy, gamma_copy, bs, len, c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t b = 0; b < bs; ++b) {
          for (std::size_t l = 0; l < len; ++l) {
            for (std::size_t k = 0; k < c; ++k) {
              const std::size_t i = (b * len + l) * c + k;
              if (gi[0]) (*gi[0])[i] += g[i] * (T(1) + gamma_copy[b * c + k]);
              if (gi[1]) (*gi[1])[b * c + k] += g[i] * x_copy[i];
              if (gi[2]) (*gi[2])[b * c + k] += g[i];
            }
          }
        }
      });
    }
    case OpKind::kRowScale: {
      need(2);
      const Tensor<T>& x = value(in[0]);
      const Tensor<T>& s = value(in[1]);
      if (x.rank() < 1 || s.size() != x.dim(0) || (s.rank() != 1 && !(s.rank() == 2 && s.dim(1) == 1))) {
        shape_fail(kind, x.shape(), s.shape());
      }
      const std::size_t rows = x.dim(0), inner = x.size() / std::max<std::size_t>(rows, 1);
      Tensor<T> out = x;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < inner; ++i) out[r * inner + i] *= s[r];
      }
      Tensor<T> x_copy = node(in[1]).needs_grad ? x : Tensor<T>();
      Tensor<T> s_copy = node(in[0]).needs_grad ? s : Tensor<T>();
      return push(kind, std::move(out), in, [x_copy, s_copy, rows, inner](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t k = r * inner + i;
            if (gi[0]) (*gi[0])[k] += g[k] * s_copy[r];
            if (gi[1]) (*gi[1])[r] += g[k] * x_copy[k];
          }
        }
      });
    }
    case OpKind::kMeanTokens:
    case OpKind::kMaxTokens: {
      need(1);
      const Tensor<T>& x = value(in[0]);
      if (x.rank() != 3 || x.dim(1) == 0) shape_fail(kind, x.shape(), x.shape(), "needs rank 3 with tokens, got");
      const std::size_t bs = x.dim(0), n = x.dim(1), c = x.dim(2);
      Tensor<T> out({bs, c});
      if (kind == OpKind::kMeanTokens) {
        const T w = T(1) / static_cast<T>(n);
        for (std::size_t b = 0; b < bs; ++b) {
          for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t k = 0; k < c; ++k) out[b * c + k] += x[(b * n + t) * c + k] * w;
          }
        }
        return push(kind, std::move(out), in, [bs, n, c, w](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
          for (std::size_t b = 0; b < bs; ++b) {
            for (std::size_t t = 0; t < n; ++t) {
              for (std::size_t k = 0; k < c; ++k) (*gi[0])[(b * n + t) * c + k] += g[b * c + k] * w;
            }
          }
        });
      }
      std::vector<std::size_t> arg(bs * c, 0);
      for (std::size_t b = 0; b < bs; ++b) {
        for (std::size_t k = 0; k < c; ++k) {
          T best = x[(b * n) * c + k];
          for (std::size_t t = 1; t < n; ++t) {
            const T v = x[(b * n + t) * c + k];
            if (v > best) {
              best = v;
              arg[b * c + k] = t;
            }
          }
          out[b * c + k] = best;
        }
      }
      return push(kind, std::move(out), in, [arg = std::move(arg), bs, n, c](const Tensor<T>& g, std::span<Tensor<T>* const> gi) {
        for (std::size_t b = 0; b < bs; ++b) {
          for (std::size_t k = 0; k < c; ++k) (*gi[0])[(b * n + arg[b * c + k]) * c + k] += g[b * c + k];
        }
      });
    }
    case OpKind::kLeaf:
    case OpKind::kCustom:
      break;
  }
  throw Error(std::string("graph: op kind '") + std::string(op_name(kind)) + "' cannot be recorded generically");
}

template <typename T>
void Graph<T>::backward(Var loss) {
  if (consumed_) throw Error("graph: backward() already ran on this graph; record a new graph");
  const Node& ln = node(loss);
  if (ln.value.size() != 1 || ln.value.rank() != 0) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(ln.value.shape()));
  }
  consumed_ = true;
  if (!ln.needs_grad) return;
  nodes_[loss.id].grad = Tensor<T>::scalar(T(1));
  std::vector<Tensor<T>*> in_grads;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.param) {
      add_into(&n.param->grad, n.grad);
    } else if (n.backward) {
      in_grads.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        Node& src = nodes_[n.inputs[k]];
        if (!src.needs_grad) continue;
        if (src.grad.empty()) src.grad = Tensor<T>(src.value.shape());
        in_grads[k] = &src.grad;
      }
      n.backward(n.grad, in_grads);
    }
    if (!n.keep_grad) n.grad = Tensor<T>();
  }
}

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  const Var in[] = {a, b};
  return record(OpKind::kMatmul, in);
}
template <typename T>
Var Graph<T>::add(Var a, Var b) {
  const Var in[] = {a, b};
  return record(OpKind::kAdd, in);
}
template <typename T>
Var Graph<T>::mul(Var a, Var b) {
  const Var in[] = {a, b};
  return record(OpKind::kMul, in);
}
template <typename T>
Var Graph<T>::scale(Var a, double factor) {
  OpAttrs at;
  at.factor = factor;
  return record(OpKind::kScale, std::span<const Var>(&a, 1), at);
}
template <typename T>
Var Graph<T>::sum(Var a) {
  return record(OpKind::kSum, std::span<const Var>(&a, 1));
}
template <typename T>
Var Graph<T>::mean(Var a) {
  return record(OpKind::kMean, std::span<const Var>(&a, 1));
}
template <typename T>
Var Graph<T>::concat(std::span<const Var> parts, std::size_t axis) {
  OpAttrs at;
  at.axis = axis;
  return record(OpKind::kConcat, parts, at);
}
template <typename T>
Var Graph<T>::slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  OpAttrs at;
  at.axis = axis;
  at.begin = begin;
  at.end = end;
  return record(OpKind::kSlice, std::span<const Var>(&a, 1), at);
}
template <typename T>
Var Graph<T>::transpose(Var a) {
  return record(OpKind::kTranspose, std::span<const Var>(&a, 1));
}
template <typename T>
Var Graph<T>::relu(Var a) {
  return record(OpKind::kRelu, std::span<const Var>(&a, 1));
}
template <typename T>
Var Graph<T>::gelu(Var a) {
  return record(OpKind::kGelu, std::span<const Var>(&a, 1));
}
template <typename T>
Var Graph<T>::tanh(Var a) {
  return record(OpKind::kTanh, std::span<const Var>(&a, 1));
}
template <typename T>
Var Graph<T>::sigmoid(Var a) {
  return record(OpKind::kSigmoid, std::span<const Var>(&a, 1));
}
template <typename T>
Var Graph<T>::softmax(Var a) {
  return record(OpKind::kSoftmax, std::span<const Var>(&a, 1));
}
template <typename T>
Var Graph<T>::layernorm(Var x, Var gamma, Var beta) {
  const Var in[] = {x, gamma, beta};
  return record(OpKind::kLayerNorm, in);
}
template <typename T>
Var Graph<T>::squared_error(Var pred, Var target) {
  const Var in[] = {pred, target};
  return record(OpKind::kSquaredError, in);
}
template <typename T>
Var Graph<T>::reshape(Var a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return record(OpKind::kReshape, std::span<const Var>(&a, 1), at);
}
template <typename T>
Var Graph<T>::bmm(Var a, Var b) {
  const Var in[] = {a, b};
  return record(OpKind::kBatchMatmul, in);
}
template <typename T>
Var Graph<T>::conv1d(Var x, Var weight, Var bias, std::size_t stride) {
  const Var in[] = {x, weight, bias};
  OpAttrs at;
  at.stride = stride;
  return record(OpKind::kConv1d, in, at);
}
template <typename T>
Var Graph<T>::upsample2(Var x) {
  return record(OpKind::kUpsample2, std::span<const Var>(&x, 1));
}
template <typename T>
Var Graph<T>::film(Var x, Var gamma, Var beta) {
  const Var in[] = {x, gamma, beta};
  return record(OpKind::kFilm, in);
}
template <typename T>
Var Graph<T>::rowscale(Var x, Var s) {
  const Var in[] = {x, s};
  return record(OpKind::kRowScale, in);
}
template <typename T>
Var Graph<T>::mean_tokens(Var x) {
  return record(OpKind::kMeanTokens, std::span<const Var>(&x, 1));
}
template <typename T>
Var Graph<T>::max_tokens(Var x) {
  return record(OpKind::kMaxTokens, std::span<const Var>(&x, 1));
}

template class Graph<float>;
template class Graph<double>;

}  // namespace fd
