#pragma once

#include <cstddef>

// Dense kernels behind the tensor ops. Each has an OpenMP-parallel primary
// version and a serial reference version under kernels::ref. Both accumulate
// every output element in ascending k order, so the two are bit-identical
// for the same inputs regardless of thread count; tests rely on that.

namespace vitbd::kernels {

// Work threshold (multiply-adds) below which the parallel versions stay
// serial; tiny matrices are not worth the fork/join.
inline constexpr std::size_t kParallelCutoff = 32768;

// c[n,m] = a[n,k] * b[k,m] (or += when accumulate). c must not alias a or b.
void matmul(double* c, const double* a, const double* b, std::size_t n,
            std::size_t k, std::size_t m, bool accumulate = false);

// c[n,m] = a[n,k] * b[m,k]^T
void matmul_nt(double* c, const double* a, const double* b, std::size_t n,
               std::size_t k, std::size_t m, bool accumulate = false);

// c[k,m] = a[n,k]^T * b[n,m]
void matmul_tn(double* c, const double* a, const double* b, std::size_t n,
               std::size_t k, std::size_t m, bool accumulate = false);

namespace ref {

void matmul(double* c, const double* a, const double* b, std::size_t n,
            std::size_t k, std::size_t m, bool accumulate = false);
void matmul_nt(double* c, const double* a, const double* b, std::size_t n,
               std::size_t k, std::size_t m, bool accumulate = false);
void matmul_tn(double* c, const double* a, const double* b, std::size_t n,
               std::size_t k, std::size_t m, bool accumulate = false);

}  // namespace ref

}  // namespace vitbd::kernels
