#pragma once

#include <algorithm>
#include <vector>

#include "stw/matrix.hpp"

namespace stw {

// C[M x N] = A[M x K] * B[K x N], row-major. The i-k-j order keeps the inner
// loop contiguous so the compiler vectorizes it.
template <typename S>
void matmul(const S* __restrict A, const S* __restrict B, S* __restrict C, int M, int K, int N,
            bool accumulate = false) {
  for (int i = 0; i < M; ++i) {
    S* __restrict c = C + static_cast<size_t>(i) * N;
    if (!accumulate) std::fill(c, c + N, S(0));
    const S* __restrict a = A + static_cast<size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const S av = a[k];
      const S* __restrict b = B + static_cast<size_t>(k) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M x N] (+)= A[K x M]^T * B[K x N]; the usual dW = X^T * dY shape.
template <typename S>
void matmul_at(const S* __restrict A, const S* __restrict B, S* __restrict C, int M, int K, int N,
               bool accumulate = true) {
  if (!accumulate) std::fill(C, C + static_cast<size_t>(M) * N, S(0));
  for (int k = 0; k < K; ++k) {
    const S* __restrict a = A + static_cast<size_t>(k) * M;
    const S* __restrict b = B + static_cast<size_t>(k) * N;
    for (int i = 0; i < M; ++i) {
      const S av = a[i];
      S* __restrict c = C + static_cast<size_t>(i) * N;
      for (int j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M x N] = A[M x K] * B[N x K]^T. B is transposed into thread-local scratch
// first; inner-product loops would otherwise defeat vectorization (FP sums
// cannot be reassociated).
template <typename S>
void matmul_bt(const S* __restrict A, const S* __restrict B, S* __restrict C, int M, int K, int N,
               bool accumulate = false) {
  thread_local std::vector<S> scratch;
  const size_t need = static_cast<size_t>(K) * N;
  if (scratch.size() < need) scratch.resize(need);
  S* __restrict bt = scratch.data();
  for (int j = 0; j < N; ++j)
    for (int k = 0; k < K; ++k) bt[static_cast<size_t>(k) * N + j] = B[static_cast<size_t>(j) * K + k];
  matmul(A, bt, C, M, K, N, accumulate);
}

// Eigen decomposition of a symmetric matrix by cyclic Jacobi rotations.
// Eigenvalues are returned in descending order with matching eigenvector
// columns.
void symmetric_eigen(const Matrix& A, std::vector<double>& values, Matrix& vectors);

}  // namespace stw
