#include "vitbd/kernels.hpp"

#include <algorithm>
#include <cstdint>

namespace vitbd::kernels {

void matmul(double* c, const double* a, const double* b, std::size_t n,
            std::size_t k, std::size_t m, bool accumulate) {
  if (!accumulate) std::fill(c, c + n * m, 0.0);
  const std::int64_t rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * k * m >= kParallelCutoff)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = b + kk * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bk[j];
    }
  }
}

void matmul_nt(double* c, const double* a, const double* b, std::size_t n,
               std::size_t k, std::size_t m, bool accumulate) {
  const std::int64_t rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * k * m >= kParallelCutoff)
  for (std::int64_t i = 0; i < rows; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

void matmul_tn(double* c, const double* a, const double* b, std::size_t n,
               std::size_t k, std::size_t m, bool accumulate) {
  if (!accumulate) std::fill(c, c + k * m, 0.0);
  const std::int64_t cols = static_cast<std::int64_t>(k);
#pragma omp parallel for schedule(static) if (n * k * m >= kParallelCutoff)
  for (std::int64_t kk = 0; kk < cols; ++kk) {
    double* ck = c + static_cast<std::size_t>(kk) * m;
    for (std::size_t r = 0; r < n; ++r) {
      const double av = a[r * k + static_cast<std::size_t>(kk)];
      const double* br = b + r * m;
      for (std::size_t j = 0; j < m; ++j) ck[j] += av * br[j];
    }
  }
}

namespace ref {

void matmul(double* c, const double* a, const double* b, std::size_t n,
            std::size_t k, std::size_t m, bool accumulate) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      // Seed with the prior value so the addition order matches the
      // parallel version exactly.
      double acc = accumulate ? c[i * m + j] : 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * m + j];
      c[i * m + j] = acc;
    }
  }
}

void matmul_nt(double* c, const double* a, const double* b, std::size_t n,
               std::size_t k, std::size_t m, bool accumulate) {
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[j * k + kk];
      double& out = c[i * m + j];
      out = accumulate ? out + acc : acc;
    }
  }
}

void matmul_tn(double* c, const double* a, const double* b, std::size_t n,
               std::size_t k, std::size_t m, bool accumulate) {
  for (std::size_t kk = 0; kk < k; ++kk) {
    for (std::size_t j = 0; j < m; ++j) {
      double acc = accumulate ? c[kk * m + j] : 0.0;
      for (std::size_t r = 0; r < n; ++r) acc += a[r * k + kk] * b[r * m + j];
      c[kk * m + j] = acc;
    }
  }
}

}  // namespace ref

}  // namespace vitbd::kernels
