#pragma once

// Dense matrix kernels. With METRO_USE_CBLAS the products go to a CBLAS
// sgemm/dgemm (deterministic for a fixed library and thread count);
// otherwise portable loops whose innermost loop is contiguous so the
// compiler vectorizes without reassociating sums.

#include <algorithm>
#include <cstddef>
#include <type_traits>
#include <vector>

#ifdef METRO_USE_CBLAS
#include <cblas.h>
#endif

namespace metro::kernels {

#ifdef METRO_USE_CBLAS
template <typename T>
void blas_gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
               bool accumulate) {
  const auto M = static_cast<int>(m), N = static_cast<int>(n), K = static_cast<int>(k);
  const int lda = ta ? M : K, ldb = tb ? K : N;
  const auto opa = ta ? CblasTrans : CblasNoTrans, opb = tb ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>)
    cblas_sgemm(CblasRowMajor, opa, opb, M, N, K, 1.0f, a, lda, b, ldb, accumulate ? 1.0f : 0.0f, c, N);
  else
    cblas_dgemm(CblasRowMajor, opa, opb, M, N, K, 1.0, a, lda, b, ldb, accumulate ? 1.0 : 0.0, c, N);
}
#endif

// C[m x n] (+)= A[m x k] * B[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
#ifdef METRO_USE_CBLAS
  if (m && n && k) return blas_gemm(false, false, m, n, k, a, b, c, accumulate);
#endif
  if (!accumulate) std::fill(c, c + m * n, T{0});
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* c0 = c + i * n;
    T* c1 = c0 + n;
    T* c2 = c1 + n;
    T* c3 = c2 + n;
    const T* a0 = a + i * k;
    const T* a1 = a0 + k;
    const T* a2 = a1 + k;
    const T* a3 = a2 + k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* bp = b + p * n;
      const T x0 = a0[p], x1 = a1[p], x2 = a2[p], x3 = a3[p];
      for (std::size_t j = 0; j < n; ++j) {
        const T bj = bp[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* bp = b + p * n;
      const T x = ai[p];
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bp[j];
    }
  }
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = std::min(rows, r0 + kBlock), c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t cc = c0; cc < c1; ++cc) dst[cc * rows + r] = src[r * cols + cc];
    }
  }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate,
             std::vector<T>& scratch) {
#ifdef METRO_USE_CBLAS
  if (m && n && k) return blas_gemm(false, true, m, n, k, a, b, c, accumulate);
#endif
  scratch.resize(k * n);
  transpose(n, k, b, scratch.data());
  gemm_nn(m, n, k, a, scratch.data(), c, accumulate);
}

// C[m x n] (+)= A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
#ifdef METRO_USE_CBLAS
  if (m && n && k) return blas_gemm(true, false, m, n, k, a, b, c, accumulate);
#endif
  if (!accumulate) std::fill(c, c + m * n, T{0});
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T x = ap[i];
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += x * bp[j];
    }
  }
}

}  // namespace metro::kernels
