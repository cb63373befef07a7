#include "dsnet/gemm.hpp"

#include <Eigen/Core>

namespace dsnet {

namespace {
template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T, typename A, typename B>
void apply(const A& lhs, const B& rhs, T alpha, T beta, MutMap<T>& out) {
  if (beta == T{0}) {
    out.noalias() = alpha * (lhs * rhs);
  } else {
    if (beta != T{1}) out *= beta;
    out.noalias() += alpha * (lhs * rhs);
  }
}
}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
  if (m == 0 || n == 0) return;
  MutMap<T> out(c, m, n, Eigen::OuterStride<>(ldc));
  if (k == 0) {
    if (beta == T{0}) out.setZero(); else out *= beta;
    return;
  }
  // Stored shapes: A is (m x k) or (k x m) when transposed; likewise for B.
  const ConstMap<T> am(a, trans_a ? k : m, trans_a ? m : k, Eigen::OuterStride<>(lda));
  const ConstMap<T> bm(b, trans_b ? n : k, trans_b ? k : n, Eigen::OuterStride<>(ldb));
  if (!trans_a && !trans_b) apply<T>(am, bm, alpha, beta, out);
  else if (trans_a && !trans_b) apply<T>(am.transpose(), bm, alpha, beta, out);
  else if (!trans_a && trans_b) apply<T>(am, bm.transpose(), alpha, beta, out);
  else apply<T>(am.transpose(), bm.transpose(), alpha, beta, out);
}

template void gemm<float>(bool, bool, std::int64_t, std::int64_t, std::int64_t, float,
                          const float*, std::int64_t, const float*, std::int64_t, float, float*,
                          std::int64_t);
template void gemm<double>(bool, bool, std::int64_t, std::int64_t, std::int64_t, double,
                           const double*, std::int64_t, const double*, std::int64_t, double,
                           double*, std::int64_t);

}  // namespace dsnet
