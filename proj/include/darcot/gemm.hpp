#pragma once

#include <cstdint>
#include <vector>

namespace darcot::detail {

// C[m,n] += A[m,k] * B[k,n], all row-major, no aliasing. The i-k-j loop
// order keeps B and C accesses contiguous so the inner loop vectorizes.
// Serial on purpose: callers parallelize over batch items, which keeps
// summation order fixed and results deterministic.
template <class S>
void gemm_acc(int64_t m, int64_t n, int64_t k, const S* __restrict a,
              const S* __restrict b, S* __restrict c) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    int64_t kk = 0;
    // 4-way k unrolling cuts the C-row traffic; the combine order is fixed,
    // so results stay deterministic run to run.
    for (; kk + 4 <= k; kk += 4) {
      S a0 = arow[kk], a1 = arow[kk + 1], a2 = arow[kk + 2], a3 = arow[kk + 3];
      const S* b0 = b + kk * n;
      const S* b1 = b0 + n;
      const S* b2 = b1 + n;
      const S* b3 = b2 + n;
      for (int64_t j = 0; j < n; ++j)
        crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
    }
    for (; kk < k; ++kk) {
      S av = arow[kk];
      const S* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <class S>
void gemm_acc_ta(int64_t m, int64_t n, int64_t k, const S* __restrict a,
                 const S* __restrict b, S* __restrict c) {
  for (int64_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    int64_t kk = 0;
    for (; kk + 4 <= k; kk += 4) {
      S a0 = a[kk * m + i], a1 = a[(kk + 1) * m + i], a2 = a[(kk + 2) * m + i],
        a3 = a[(kk + 3) * m + i];
      const S* b0 = b + kk * n;
      const S* b1 = b0 + n;
      const S* b2 = b1 + n;
      const S* b3 = b2 + n;
      for (int64_t j = 0; j < n; ++j)
        crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
    }
    for (; kk < k; ++kk) {
      S av = a[kk * m + i];
      const S* brow = b + kk * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T. For long reductions the dot-product form
// defeats vectorization (float sums cannot be reassociated), so B is
// transposed into a thread-local scratch and fed to the broadcast-FMA
// kernel; summation order is fixed either way, keeping results
// deterministic.
template <class S>
void gemm_acc_tb(int64_t m, int64_t n, int64_t k, const S* __restrict a,
                 const S* __restrict b, S* __restrict c) {
  if (k >= 32 && m * n >= 512) {
    thread_local std::vector<S> scratch;
    scratch.resize(size_t(n * k));
    S* bt = scratch.data();
    for (int64_t j = 0; j < n; ++j)
      for (int64_t kk = 0; kk < k; ++kk) bt[kk * n + j] = b[j * k + kk];
    gemm_acc(m, n, k, a, bt, c);
    return;
  }
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const S* brow = b + j * k;
      S acc = S(0);
      for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

template <class S>
void gemm_dispatch(bool ta, bool tb, int64_t m, int64_t n, int64_t k,
                   const S* a, const S* b, S* c) {
  if (!ta && !tb) {
    gemm_acc(m, n, k, a, b, c);
  } else if (ta && !tb) {
    gemm_acc_ta(m, n, k, a, b, c);
  } else if (!ta && tb) {
    gemm_acc_tb(m, n, k, a, b, c);
  } else {
    // (A^T B^T)[i,j] = sum_k A[k,i] B[j,k]
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        S acc = S(0);
        for (int64_t kk = 0; kk < k; ++kk) acc += a[kk * m + i] * b[j * k + kk];
        c[i * n + j] += acc;
      }
  }
}

}  // namespace darcot::detail
