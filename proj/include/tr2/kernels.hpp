#pragma once

#include <cstdint>

namespace tr2::kernels {

// C[m,n] = op(A) * op(B), op controlled by the transpose flags.
// A is m x k (or k x m when trans_a), B is k x n (or n x k when trans_b).
// The per-element summation order is fixed, so the parallel and serial
// versions produce bitwise-identical results.
void matmul(const double* a, const double* b, double* c,
            std::int64_t m, std::int64_t k, std::int64_t n,
            bool trans_a, bool trans_b);

// Naive triple-loop reference, always single-threaded. Kept for tests and
// the kernel benchmark.
void matmul_ref(const double* a, const double* b, double* c,
                std::int64_t m, std::int64_t k, std::int64_t n,
                bool trans_a, bool trans_b);

// Work threshold (m*k*n) below which matmul stays serial.
inline constexpr std::int64_t kParallelThreshold = 32768;

}  // namespace tr2::kernels
