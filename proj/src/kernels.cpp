#include "tr2/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace tr2::kernels {

namespace {

inline double elem(const double* p, std::int64_t r, std::int64_t c,
                   std::int64_t ld, bool trans) {
  return trans ? p[c * ld + r] : p[r * ld + c];
}

}  // namespace

void matmul_ref(const double* a, const double* b, double* c,
                std::int64_t m, std::int64_t k, std::int64_t n,
                bool trans_a, bool trans_b) {
  const std::int64_t lda = trans_a ? m : k;
  const std::int64_t ldb = trans_b ? k : n;
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) {
        acc += elem(a, i, p, lda, trans_a) * elem(b, p, j, ldb, trans_b);
      }
      c[i * n + j] = acc;
    }
  }
}

void matmul(const double* a, const double* b, double* c,
            std::int64_t m, std::int64_t k, std::int64_t n,
            bool trans_a, bool trans_b) {
  const std::int64_t lda = trans_a ? m : k;
  const std::int64_t ldb = trans_b ? k : n;
#ifdef _OPENMP
  const bool par = m * k * n >= kParallelThreshold && m > 1;
#pragma omp parallel for schedule(static) if (par)
#endif
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) {
        acc += elem(a, i, p, lda, trans_a) * elem(b, p, j, ldb, trans_b);
      }
      c[i * n + j] = acc;
    }
  }
}

}  // namespace tr2::kernels
