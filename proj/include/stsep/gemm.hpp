#pragma once

#include <cblas.h>

#include <concepts>

namespace stsep {

// Row-major C[m,n] = alpha * op(A) * op(B) + beta * C. Output elements are
// each produced by a single OpenBLAS tile, so results are run-to-run
// deterministic for a fixed thread count.
template <std::floating_point S>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, S alpha, const S* a, int lda,
          const S* b, int ldb, S beta, S* c, int ldc) {
  auto ta = trans_a ? CblasTrans : CblasNoTrans;
  auto tb = trans_b ? CblasTrans : CblasNoTrans;
  if constexpr (std::same_as<S, float>) {
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

inline void set_compute_threads(int n) {
  if (n > 0) openblas_set_num_threads(n);
}

}  // namespace stsep
