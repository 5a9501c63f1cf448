#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace fd::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MatView = Eigen::Map<RowMat<T>>;

template <typename T>
using ConstMatView = Eigen::Map<const RowMat<T>>;

// C(m,n) += op(A) * op(B) on row-major buffers.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a,
              bool trans_b) {
  const auto mi = static_cast<Eigen::Index>(m);
  const auto ki = static_cast<Eigen::Index>(k);
  const auto ni = static_cast<Eigen::Index>(n);
  MatView<T> cm(c, mi, ni);
  if (!trans_a && !trans_b) {
    cm.noalias() += ConstMatView<T>(a, mi, ki) * ConstMatView<T>(b, ki, ni);
  } else if (trans_a && !trans_b) {
    cm.noalias() += ConstMatView<T>(a, ki, mi).transpose() * ConstMatView<T>(b, ki, ni);
  } else if (!trans_a && trans_b) {
    cm.noalias() += ConstMatView<T>(a, mi, ki) * ConstMatView<T>(b, ni, ki).transpose();
  } else {
    cm.noalias() += ConstMatView<T>(a, ki, mi).transpose() * ConstMatView<T>(b, ni, ki).transpose();
  }
}

}  // namespace fd::detail
