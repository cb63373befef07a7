#pragma once

#include <cstdint>

namespace dsnet {

/// Row-major C = alpha * op(A) * op(B) + beta * C, with op(A) m x k and
/// op(B) k x n. Leading dimensions are row strides of the stored matrices.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc);

}  // namespace dsnet
