#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "vitbd/rng.hpp"
#include "vitbd/tensor.hpp"

namespace testutil {

// Central finite differences against reverse-mode gradients over every
// element of every listed leaf; returns the worst relative error with the
// denominator floored at 1e-8. f must rebuild its graph from the leaves'
// current values on each call and return a scalar loss.
inline double max_grad_rel_err(const std::vector<vitbd::Tensor*>& leaves,
                               const std::function<vitbd::Tensor()>& f,
                               double h = 1e-5) {
  using vitbd::NoGradGuard;
  using vitbd::Tensor;
  for (Tensor* t : leaves) t->zero_grad();
  vitbd::backward(f());
  double worst = 0.0;
  for (Tensor* t : leaves) {
    auto ad = t->grad();
    auto vals = t->raw_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      double lp, lm;
      {
        NoGradGuard ng;
        vals[i] = keep + h;
        lp = f().item();
        vals[i] = keep - h;
        lm = f().item();
      }
      vals[i] = keep;
      const double fd = (lp - lm) / (2.0 * h);
      const double denom =
          std::max(std::max(std::fabs(ad[i]), std::fabs(fd)), 1e-8);
      worst = std::max(worst, std::fabs(ad[i] - fd) / denom);
    }
  }
  return worst;
}

inline vitbd::Tensor rand_tensor(std::vector<std::size_t> shape, vitbd::Rng& rng,
                                 bool requires_grad = false, double lo = -2.0,
                                 double hi = 2.0) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return vitbd::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Fixed random linear functional of x, so the gradient check exercises every
// output element with a distinct weight (a plain sum would cancel softmax
// gradients to zero, for instance).
inline vitbd::Tensor weighted_sum(const vitbd::Tensor& x, std::uint64_t seed) {
  vitbd::Rng rng(seed);
  std::vector<double> w(x.size());
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  return vitbd::sum(
      vitbd::mul(x, vitbd::Tensor::from_data(x.shape(), std::move(w))));
}

}  // namespace testutil
