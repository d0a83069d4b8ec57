#pragma once

#include <cstddef>

namespace mspcaps::kernels {

/// Row-major C[M,N] (+)= op(A)[M,K] * op(B)[K,N], where op transposes when
/// the matching flag is set (A then stored K x M, B stored N x K).
/// Large products go to Eigen; small ones run a plain i-k-j loop whose
/// per-element summation order is k ascending starting from zero.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate);

/// Always the plain loop; exposed for tests and small batched products.
template <typename T>
void gemm_naive(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                const T* a, const T* b, T* c, bool accumulate);

}  // namespace mspcaps::kernels
