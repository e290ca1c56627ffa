#pragma once

#include <cblas.h>
#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <string>

namespace dfkd {

// C (MxN) = alpha * op(A) (MxK) * op(B) (KxN) + beta * C, row-major.
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a, int lda,
                 const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
              alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void set_blas_threads(int n) { openblas_set_num_threads(n); }

namespace detail {

inline bool cpu_has_flag(const char* flag) {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("flags", 0) == 0 && line.find(flag) != std::string::npos) return true;
  }
  return false;
}

}  // namespace detail

// Some hypervisors mask the CPU model string, which makes OpenBLAS's
// DYNAMIC_ARCH dispatch fall back to its generic SSE2 kernel (~4x slower
// here). The core type is only read from the environment when the library
// initializes, so when we detect the fallback on an AVX-512 machine we
// re-exec the current binary once with OPENBLAS_CORETYPE pinned.
inline void ensure_fast_blas(char** argv) {
  set_blas_threads(1);  // GEMM is fastest single-threaded on this workload; callers parallelize across runs
  if (std::getenv("OPENBLAS_CORETYPE") != nullptr) return;
  const char* core = openblas_get_corename();
  if (core != nullptr && std::strcmp(core, "Prescott") == 0 && detail::cpu_has_flag("avx512f")) {
    ::setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
    ::execv("/proc/self/exe", argv);
    // execv only returns on failure; continue with the slow kernel.
  }
}

}  // namespace dfkd
