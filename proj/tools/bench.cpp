// Times the OpenMP kernels against their serial reference, then one full
// forward+backward step of the default transformer. The parallel kernels are
// required to match the reference bit for bit, so every timing row doubles as
// an equality check.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "vitbd/kernels.hpp"
#include "vitbd/model.hpp"
#include "vitbd/rng.hpp"
#include "vitbd/tensor.hpp"

using namespace vitbd;

namespace {

template <class F>
double best_seconds(F&& fn, int reps = 3) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best,
                    std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

using KernelFn = void (*)(double*, const double*, const double*, std::size_t,
                          std::size_t, std::size_t, bool);

struct NamedKernel {
  const char* name;
  KernelFn parallel;
  KernelFn reference;
};

void bench_kernels() {
  const NamedKernel ops[] = {
      {"matmul", kernels::matmul, kernels::ref::matmul},
      {"matmul_nt", kernels::matmul_nt, kernels::ref::matmul_nt},
      {"matmul_tn", kernels::matmul_tn, kernels::ref::matmul_tn},
  };
  const std::size_t sizes[] = {64, 128, 256, 512};

  std::printf("%-10s %6s %12s %12s %9s %10s\n", "kernel", "n", "serial s",
              "parallel s", "speedup", "bits");
  Rng rng(7);
  for (const NamedKernel& op : ops) {
    for (const std::size_t n : sizes) {
      std::vector<double> a(n * n), b(n * n), c_par(n * n), c_ref(n * n);
      for (double& v : a) v = rng.uniform(-1.0, 1.0);
      for (double& v : b) v = rng.uniform(-1.0, 1.0);

      const double ts = best_seconds(
          [&] { op.reference(c_ref.data(), a.data(), b.data(), n, n, n, false); });
      const double tp = best_seconds(
          [&] { op.parallel(c_par.data(), a.data(), b.data(), n, n, n, false); });
      const bool same =
          std::memcmp(c_par.data(), c_ref.data(), n * n * sizeof(double)) == 0;
      std::printf("%-10s %6zu %12.6f %12.6f %8.2fx %10s\n", op.name, n, ts, tp,
                  ts / tp, same ? "identical" : "DIFFER");
    }
  }
}

void bench_model_step() {
  ModelSpec spec;  // the default 32x32 / patch 8 / 3 blocks / embed 64 model
  const Checkpoint ckpt = Checkpoint::init(spec, 1);

  const std::size_t batch = 32;
  const std::size_t stride = spec.channels * spec.image_size * spec.image_size;
  std::vector<double> pix(batch * stride);
  Rng rng(2);
  for (double& v : pix) v = rng.uniform();
  const Tensor images = Tensor::from_data(
      {batch, spec.channels, spec.image_size, spec.image_size},
      std::move(pix));
  std::vector<int> labels(batch);
  for (std::size_t i = 0; i < batch; ++i)
    labels[i] = static_cast<int>(i % spec.num_classes);

  const auto step = [&] {
    const Tensor loss =
        cross_entropy(forward(ckpt, images).logits,
                      std::span<const int>(labels.data(), labels.size()));
    backward(loss);
  };

#ifdef _OPENMP
  const int max_threads = omp_get_max_threads();
  omp_set_num_threads(1);
  const double t1 = best_seconds(step);
  omp_set_num_threads(max_threads);
  const double tn = best_seconds(step);
  std::printf("\nforward+backward, batch %zu: %.4f s at 1 thread, "
              "%.4f s at %d threads (%.2fx)\n",
              batch, t1, tn, max_threads, t1 / tn);
#else
  const double t1 = best_seconds(step);
  std::printf("\nforward+backward, batch %zu: %.4f s (built without OpenMP)\n",
              batch, t1);
#endif
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("OpenMP enabled, max threads %d\n\n", omp_get_max_threads());
#else
  std::printf("built without OpenMP; parallel entry points run serial\n\n");
#endif
  bench_kernels();
  bench_model_step();
  return 0;
}
