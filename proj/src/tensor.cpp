#include "vitbd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <unordered_set>
#include <utility>

#include "vitbd/kernels.hpp"

namespace vitbd {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_seq{1};

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t p = 1;
  for (std::size_t d : shape) p *= d;
  return p;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Decomposes a shape around `axis` into outer * dim * inner extents.
void split_axis(const std::vector<std::size_t>& shape, std::size_t axis,
                std::size_t* outer, std::size_t* dim, std::size_t* inner) {
  *outer = 1;
  for (std::size_t i = 0; i < axis; ++i) *outer *= shape[i];
  *dim = shape[axis];
  *inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) *inner *= shape[i];
}

bool want_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace

namespace detail {

NodePtr make_node(std::vector<std::size_t> shape, std::vector<double> values,
                  bool requires_grad, const char* op) {
  if (shape_product(shape) != values.size())
    throw DimensionError(std::string(op) + ": shape " + shape_str(shape) +
                         " does not match " + std::to_string(values.size()) +
                         " values");
  for (double v : values)
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite value in ") + op);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->requires_grad = requires_grad;
  n->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  return n;
}

void ensure_grad(TensorNode& n) {
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
}

}  // namespace detail

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- Tensor --------------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::vector<double> v(shape_product(shape), 0.0);
  return Tensor(detail::make_node(std::move(shape), std::move(v), requires_grad,
                                  "zeros"));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value,
                    bool requires_grad) {
  std::vector<double> v(shape_product(shape), value);
  return Tensor(detail::make_node(std::move(shape), std::move(v), requires_grad,
                                  "full"));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape,
                         std::vector<double> values, bool requires_grad) {
  return Tensor(detail::make_node(std::move(shape), std::move(values),
                                  requires_grad, "from_data"));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
  if (!node_) throw ValueError("shape() on an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size() const {
  if (!node_) throw ValueError("size() on an undefined tensor");
  return node_->values.size();
}

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() requires a single-element tensor");
  return node_->values[0];
}

double Tensor::value_at(std::size_t linear_index) const {
  if (linear_index >= size())
    throw DimensionError("value_at: index " + std::to_string(linear_index) +
                         " out of range for size " + std::to_string(size()));
  return node_->values[linear_index];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size())
    throw DimensionError("at: expected " + std::to_string(s.size()) +
                         " indices, got " + std::to_string(index.size()));
  std::size_t linear = 0;
  std::size_t axis = 0;
  for (std::size_t ix : index) {
    if (ix >= s[axis])
      throw DimensionError("at: index " + std::to_string(ix) +
                           " out of range on axis " + std::to_string(axis));
    linear = linear * s[axis] + ix;
    ++axis;
  }
  return node_->values[linear];
}

std::span<const double> Tensor::values() const {
  if (!node_) throw ValueError("values() on an undefined tensor");
  return {node_->values.data(), node_->values.size()};
}

std::span<double> Tensor::raw_values() {
  if (!node_) throw ValueError("raw_values() on an undefined tensor");
  if (node_->backprop || !node_->parents.empty())
    throw ValueError("raw_values() is restricted to leaf tensors");
  return {node_->values.data(), node_->values.size()};
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  if (!node_) throw ValueError("set_requires_grad on an undefined tensor");
  if (node_->backprop || !node_->parents.empty())
    throw ValueError("set_requires_grad is restricted to leaf tensors");
  node_->requires_grad = rg;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw ValueError("grad() on an undefined tensor");
  if (node_->grad.empty())
    throw ValueError("grad() before any backward pass reached this tensor");
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (!node_) throw ValueError("zero_grad on an undefined tensor");
  if (!node_->requires_grad)
    throw ValueError("zero_grad on a tensor that does not require grad");
  detail::ensure_grad(*node_);
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  if (!node_) throw ValueError("detach() on an undefined tensor");
  return Tensor(detail::make_node(node_->shape, node_->values, false, "detach"));
}

Tensor Tensor::clone() const {
  if (!node_) throw ValueError("clone() on an undefined tensor");
  return Tensor(detail::make_node(node_->shape, node_->values,
                                  node_->requires_grad, "clone"));
}

// ---- ops -------------------------------------------------------------------

namespace {

// Per-batch serial matmuls used when parallelising over the batch axis; the
// ref kernels accumulate in the same per-element order as the parallel ones,
// so either path yields identical bits.
void batched_matmul(double* c, const double* a, const double* b, std::size_t bn,
                    std::size_t n, std::size_t k, std::size_t m) {
  if (bn == 1) {
    kernels::matmul(c, a, b, n, k, m);
    return;
  }
  const std::int64_t batches = static_cast<std::int64_t>(bn);
#pragma omp parallel for schedule(static) if (bn * n * k * m >= kernels::kParallelCutoff)
  for (std::int64_t i = 0; i < batches; ++i) {
    const std::size_t s = static_cast<std::size_t>(i);
    kernels::ref::matmul(c + s * n * m, a + s * n * k, b + s * k * m, n, k, m);
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool rg = want_grad({&a, &b});

  if (as.size() == 2 && bs.size() == 2) {
    const std::size_t n = as[0], k = as[1], m = bs[1];
    if (bs[0] != k)
      throw DimensionError("matmul: inner dimensions " + shape_str(as) + " x " +
                           shape_str(bs) + " do not match");
    std::vector<double> out(n * m);
    kernels::matmul(out.data(), a.values().data(), b.values().data(), n, k, m);
    auto node = detail::make_node({n, m}, std::move(out), rg, "matmul");
    if (rg) {
      node->parents = {a.node(), b.node()};
      node->backprop = [n, k, m](detail::TensorNode& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pa.requires_grad) {
          detail::ensure_grad(pa);
          kernels::matmul_nt(pa.grad.data(), nd.grad.data(), pb.values.data(), n,
                             m, k, true);
        }
        if (pb.requires_grad) {
          detail::ensure_grad(pb);
          kernels::matmul_tn(pb.grad.data(), pa.values.data(), nd.grad.data(), n,
                             k, m, true);
        }
      };
    }
    return Tensor(node);
  }

  if (as.size() == 3 && bs.size() == 3) {
    const std::size_t bn = as[0], n = as[1], k = as[2], m = bs[2];
    if (bs[0] != bn || bs[1] != k)
      throw DimensionError("matmul: batched shapes " + shape_str(as) + " x " +
                           shape_str(bs) + " do not match");
    std::vector<double> out(bn * n * m);
    batched_matmul(out.data(), a.values().data(), b.values().data(), bn, n, k, m);
    auto node = detail::make_node({bn, n, m}, std::move(out), rg, "matmul");
    if (rg) {
      node->parents = {a.node(), b.node()};
      node->backprop = [bn, n, k, m](detail::TensorNode& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        const std::int64_t batches = static_cast<std::int64_t>(bn);
        if (pa.requires_grad) {
          detail::ensure_grad(pa);
#pragma omp parallel for schedule(static) if (bn * n * k * m >= kernels::kParallelCutoff)
          for (std::int64_t i = 0; i < batches; ++i) {
            const std::size_t s = static_cast<std::size_t>(i);
            kernels::ref::matmul_nt(pa.grad.data() + s * n * k,
                                    nd.grad.data() + s * n * m,
                                    pb.values.data() + s * k * m, n, m, k, true);
          }
        }
        if (pb.requires_grad) {
          detail::ensure_grad(pb);
#pragma omp parallel for schedule(static) if (bn * n * k * m >= kernels::kParallelCutoff)
          for (std::int64_t i = 0; i < batches; ++i) {
            const std::size_t s = static_cast<std::size_t>(i);
            kernels::ref::matmul_tn(pb.grad.data() + s * k * m,
                                    pa.values.data() + s * n * k,
                                    nd.grad.data() + s * n * m, n, k, m, true);
          }
        }
      };
    }
    return Tensor(node);
  }

  throw DimensionError("matmul: expected two 2D or two 3D tensors, got " +
                       shape_str(as) + " x " + shape_str(bs));
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size())
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
  std::size_t outer, d, inner;
  split_axis(s, axis, &outer, &d, &inner);
  const std::size_t lines = outer * inner;
  const bool rg = want_grad({&x});

  std::vector<double> out(x.size());
  const double* v = x.values().data();
  const std::int64_t nlines = static_cast<std::int64_t>(lines);
#pragma omp parallel for schedule(static) if (x.size() >= kernels::kParallelCutoff)
  for (std::int64_t li = 0; li < nlines; ++li) {
    const std::size_t o = static_cast<std::size_t>(li) / inner;
    const std::size_t in = static_cast<std::size_t>(li) % inner;
    const std::size_t base = o * d * inner + in;
    double mx = v[base];
    for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, v[base + i * inner]);
    double sum = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double e = std::exp(v[base + i * inner] - mx);
      out[base + i * inner] = e;
      sum += e;
    }
    for (std::size_t i = 0; i < d; ++i) out[base + i * inner] /= sum;
  }

  auto node = detail::make_node(s, std::move(out), rg, "softmax");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [d, inner, nlines](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double* y = nd.values.data();
      const double* g = nd.grad.data();
      double* dx = px.grad.data();
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
      for (std::int64_t li = 0; li < nlines; ++li) {
        const std::size_t o = static_cast<std::size_t>(li) / inner;
        const std::size_t in = static_cast<std::size_t>(li) % inner;
        const std::size_t base = o * d * inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i)
          dot += g[base + i * inner] * y[base + i * inner];
        for (std::size_t i = 0; i < d; ++i) {
          const std::size_t ix = base + i * inner;
          dx[ix] += y[ix] * (g[ix] - dot);
        }
      }
    };
  }
  return Tensor(node);
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps) {
  const auto& s = x.shape();
  if (s.empty()) throw DimensionError("layernorm: rank-0 input");
  const std::size_t d = s.back();
  if (gain.rank() != 1 || gain.shape()[0] != d || bias.rank() != 1 ||
      bias.shape()[0] != d)
    throw DimensionError("layernorm: gain/bias must be rank-1 of length " +
                         std::to_string(d));
  const std::size_t rows = x.size() / d;
  const bool rg = want_grad({&x, &gain, &bias});

  std::vector<double> out(x.size());
  const double* v = x.values().data();
  const double* gv = gain.values().data();
  const double* bv = bias.values().data();
  const std::int64_t nrows = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (x.size() >= kernels::kParallelCutoff)
  for (std::int64_t r = 0; r < nrows; ++r) {
    const double* row = v + static_cast<std::size_t>(r) * d;
    double* orow = out.data() + static_cast<std::size_t>(r) * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j)
      orow[j] = gv[j] * ((row[j] - mu) * inv) + bv[j];
  }

  auto node = detail::make_node(s, std::move(out), rg, "layernorm");
  if (rg) {
    node->parents = {x.node(), gain.node(), bias.node()};
    node->backprop = [d, rows, eps](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      auto& pg = *nd.parents[1];
      auto& pb = *nd.parents[2];
      if (px.requires_grad) detail::ensure_grad(px);
      if (pg.requires_grad) detail::ensure_grad(pg);
      if (pb.requires_grad) detail::ensure_grad(pb);
      const double* v = px.values.data();
      const double* gv = pg.values.data();
      const double* g = nd.grad.data();
      std::vector<double> xhat(d), gh(d);
      // Serial over rows: the gain/bias gradients sum across rows and the
      // accumulation order must not depend on the thread count.
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = v + r * d;
        const double* grow = g + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double c = row[j] - mu;
          var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) xhat[j] = (row[j] - mu) * inv;
        if (pg.requires_grad)
          for (std::size_t j = 0; j < d; ++j) pg.grad[j] += grow[j] * xhat[j];
        if (pb.requires_grad)
          for (std::size_t j = 0; j < d; ++j) pb.grad[j] += grow[j];
        if (px.requires_grad) {
          double mgh = 0.0, mghx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            gh[j] = grow[j] * gv[j];
            mgh += gh[j];
            mghx += gh[j] * xhat[j];
          }
          mgh /= static_cast<double>(d);
          mghx /= static_cast<double>(d);
          double* dxrow = px.grad.data() + r * d;
          for (std::size_t j = 0; j < d; ++j)
            dxrow[j] += (gh[j] - mgh - xhat[j] * mghx) * inv;
        }
      }
    };
  }
  return Tensor(node);
}

Tensor gelu(const Tensor& x) {
  const bool rg = want_grad({&x});
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  std::vector<double> out(x.size());
  const double* v = x.values().data();
  const std::int64_t n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for schedule(static) if (x.size() >= kernels::kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] =
        0.5 * v[i] * (1.0 + std::erf(v[i] * inv_sqrt2));

  auto node = detail::make_node(x.shape(), std::move(out), rg, "gelu");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
      const double inv_sqrt2pi = 1.0 / std::sqrt(8.0 * std::atan(1.0));
      const double* v = px.values.data();
      const double* g = nd.grad.data();
      double* dx = px.grad.data();
      const std::int64_t n = static_cast<std::int64_t>(nd.values.size());
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
      for (std::int64_t i = 0; i < n; ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(v[i] * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v[i] * v[i]);
        dx[i] += g[i] * (cdf + v[i] * pdf);
      }
    };
  }
  return Tensor(node);
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    const bool rg = want_grad({&a, &b});
    std::vector<double> out(a.size());
    const double* av = a.values().data();
    const double* bv = b.values().data();
    const std::int64_t n = static_cast<std::int64_t>(a.size());
#pragma omp parallel for schedule(static) if (a.size() >= kernels::kParallelCutoff)
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = av[i] + bv[i];
    auto node = detail::make_node(a.shape(), std::move(out), rg, "add");
    if (rg) {
      node->parents = {a.node(), b.node()};
      node->backprop = [](detail::TensorNode& nd) {
        const double* g = nd.grad.data();
        const std::int64_t n = static_cast<std::int64_t>(nd.values.size());
        for (std::size_t p = 0; p < 2; ++p) {
          auto& par = *nd.parents[p];
          if (!par.requires_grad) continue;
          detail::ensure_grad(par);
          double* dst = par.grad.data();
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
          for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
        }
      };
    }
    return Tensor(node);
  }

  // Bias add: one operand is rank-1 matching the other's last axis.
  const Tensor* big = &a;
  const Tensor* vec = &b;
  if (b.rank() == 1 && a.rank() > 1 && b.shape()[0] == a.shape().back()) {
    // keep assignment above
  } else if (a.rank() == 1 && b.rank() > 1 && a.shape()[0] == b.shape().back()) {
    big = &b;
    vec = &a;
  } else {
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not addable");
  }
  const std::size_t d = vec->shape()[0];
  const std::size_t rows = big->size() / d;
  const bool rg = want_grad({&a, &b});
  std::vector<double> out(big->size());
  const double* bigv = big->values().data();
  const double* vecv = vec->values().data();
  const std::int64_t n = static_cast<std::int64_t>(big->size());
#pragma omp parallel for schedule(static) if (big->size() >= kernels::kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = bigv[i] + vecv[static_cast<std::size_t>(i) % d];
  auto node = detail::make_node(big->shape(), std::move(out), rg, "add");
  if (rg) {
    node->parents = {big->node(), vec->node()};
    node->backprop = [d, rows](detail::TensorNode& nd) {
      auto& pbig = *nd.parents[0];
      auto& pvec = *nd.parents[1];
      const double* g = nd.grad.data();
      if (pbig.requires_grad) {
        detail::ensure_grad(pbig);
        double* dst = pbig.grad.data();
        const std::int64_t n = static_cast<std::int64_t>(nd.values.size());
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
        for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
      }
      if (pvec.requires_grad) {
        detail::ensure_grad(pvec);
        // Row-ascending accumulation, independent of thread count.
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) pvec.grad[j] += g[r * d + j];
      }
    };
  }
  return Tensor(node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  const bool rg = want_grad({&a, &b});
  std::vector<double> out(a.size());
  const double* av = a.values().data();
  const double* bv = b.values().data();
  const std::int64_t n = static_cast<std::int64_t>(a.size());
#pragma omp parallel for schedule(static) if (a.size() >= kernels::kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = av[i] * bv[i];
  auto node = detail::make_node(a.shape(), std::move(out), rg, "mul");
  if (rg) {
    node->parents = {a.node(), b.node()};
    node->backprop = [](detail::TensorNode& nd) {
      auto& pa = *nd.parents[0];
      auto& pb = *nd.parents[1];
      const double* g = nd.grad.data();
      const std::int64_t n = static_cast<std::int64_t>(nd.values.size());
      if (pa.requires_grad) {
        detail::ensure_grad(pa);
        double* dst = pa.grad.data();
        const double* other = pb.values.data();
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
        for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i] * other[i];
      }
      if (pb.requires_grad) {
        detail::ensure_grad(pb);
        double* dst = pb.grad.data();
        const double* other = pa.values.data();
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
        for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i] * other[i];
      }
    };
  }
  return Tensor(node);
}

Tensor scale(const Tensor& x, double c) {
  const bool rg = want_grad({&x});
  std::vector<double> out(x.size());
  const double* v = x.values().data();
  const std::int64_t n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for schedule(static) if (x.size() >= kernels::kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = c * v[i];
  auto node = detail::make_node(x.shape(), std::move(out), rg, "scale");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [c](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double* g = nd.grad.data();
      double* dst = px.grad.data();
      const std::int64_t n = static_cast<std::int64_t>(nd.values.size());
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
      for (std::int64_t i = 0; i < n; ++i) dst[i] += c * g[i];
    };
  }
  return Tensor(node);
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
  if (shape_product(shape) != x.size())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " +
                         shape_str(shape) + " changes the element count");
  const bool rg = want_grad({&x});
  std::vector<double> out(x.values().begin(), x.values().end());
  auto node = detail::make_node(std::move(shape), std::move(out), rg, "reshape");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double* g = nd.grad.data();
      double* dst = px.grad.data();
      const std::int64_t n = static_cast<std::int64_t>(nd.values.size());
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
      for (std::int64_t i = 0; i < n; ++i) dst[i] += g[i];
    };
  }
  return Tensor(node);
}

namespace {

// Maps a linear index in the transposed tensor back to the source tensor.
struct TransposeMap {
  std::vector<std::size_t> out_shape;
  std::vector<std::size_t> in_strides;  // in output-axis order
  std::size_t map(std::size_t out_index) const {
    std::size_t rem = out_index;
    std::size_t in_index = 0;
    for (std::size_t ax = out_shape.size(); ax-- > 0;) {
      const std::size_t coord = rem % out_shape[ax];
      rem /= out_shape[ax];
      in_index += coord * in_strides[ax];
    }
    return in_index;
  }
};

TransposeMap build_transpose_map(const std::vector<std::size_t>& s,
                                 std::size_t ax0, std::size_t ax1) {
  std::vector<std::size_t> strides(s.size(), 1);
  for (std::size_t i = s.size() - 1; i-- > 0;) strides[i] = strides[i + 1] * s[i + 1];
  TransposeMap tm;
  tm.out_shape = s;
  std::swap(tm.out_shape[ax0], tm.out_shape[ax1]);
  tm.in_strides.resize(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) tm.in_strides[i] = strides[i];
  std::swap(tm.in_strides[ax0], tm.in_strides[ax1]);
  return tm;
}

}  // namespace

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  const auto& s = x.shape();
  if (axis0 >= s.size() || axis1 >= s.size() || axis0 == axis1)
    throw DimensionError("transpose: bad axes " + std::to_string(axis0) + "," +
                         std::to_string(axis1) + " for " + shape_str(s));
  const bool rg = want_grad({&x});
  TransposeMap tm = build_transpose_map(s, axis0, axis1);
  std::vector<double> out(x.size());
  const double* v = x.values().data();
  const std::int64_t n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for schedule(static) if (x.size() >= kernels::kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = v[tm.map(static_cast<std::size_t>(i))];
  auto node = detail::make_node(tm.out_shape, std::move(out), rg, "transpose");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [tm](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double* g = nd.grad.data();
      double* dst = px.grad.data();
      const std::int64_t n = static_cast<std::int64_t>(nd.values.size());
      // The mapping is a bijection, so parallel writes never collide.
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
      for (std::int64_t i = 0; i < n; ++i)
        dst[tm.map(static_cast<std::size_t>(i))] += g[i];
    };
  }
  return Tensor(node);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len) {
  const auto& s = x.shape();
  if (axis >= s.size())
    throw DimensionError("slice: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
  if (len == 0 || start + len > s[axis])
    throw DimensionError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of bounds on axis " +
                         std::to_string(axis));
  std::size_t outer, d, inner;
  split_axis(s, axis, &outer, &d, &inner);
  const bool rg = want_grad({&x});
  std::vector<std::size_t> oshape = s;
  oshape[axis] = len;
  std::vector<double> out(outer * len * inner);
  const double* v = x.values().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < len; ++i)
      std::copy_n(v + (o * d + start + i) * inner, inner,
                  out.data() + (o * len + i) * inner);
  auto node = detail::make_node(std::move(oshape), std::move(out), rg, "slice");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [outer, d, inner, start, len](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double* g = nd.grad.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < len; ++i) {
          double* dst = px.grad.data() + (o * d + start + i) * inner;
          const double* src = g + (o * len + i) * inner;
          for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
        }
    };
  }
  return Tensor(node);
}

Tensor concat(std::span<const Tensor> xs, std::size_t axis) {
  if (xs.empty()) throw DimensionError("concat: no inputs");
  const auto& s0 = xs[0].shape();
  if (axis >= s0.size())
    throw DimensionError("concat: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s0));
  std::size_t total = 0;
  for (const Tensor& t : xs) {
    const auto& s = t.shape();
    if (s.size() != s0.size())
      throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw DimensionError("concat: shapes differ outside axis " +
                             std::to_string(axis));
    total += s[axis];
  }
  std::size_t outer, d0, inner;
  split_axis(s0, axis, &outer, &d0, &inner);
  bool rg = false;
  if (grad_enabled())
    for (const Tensor& t : xs)
      if (t.requires_grad()) rg = true;

  std::vector<std::size_t> oshape = s0;
  oshape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> dims(xs.size());
  std::size_t off = 0;
  for (std::size_t p = 0; p < xs.size(); ++p) {
    const std::size_t dp = xs[p].shape()[axis];
    dims[p] = dp;
    const double* v = xs[p].values().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v + o * dp * inner, dp * inner,
                  out.data() + (o * total + off) * inner);
    off += dp;
  }
  auto node = detail::make_node(std::move(oshape), std::move(out), rg, "concat");
  if (rg) {
    node->parents.reserve(xs.size());
    for (const Tensor& t : xs) node->parents.push_back(t.node());
    node->backprop = [outer, inner, total, dims](detail::TensorNode& nd) {
      const double* g = nd.grad.data();
      std::size_t off = 0;
      for (std::size_t p = 0; p < nd.parents.size(); ++p) {
        auto& par = *nd.parents[p];
        const std::size_t dp = dims[p];
        if (par.requires_grad) {
          detail::ensure_grad(par);
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = g + (o * total + off) * inner;
            double* dst = par.grad.data() + o * dp * inner;
            for (std::size_t j = 0; j < dp * inner; ++j) dst[j] += src[j];
          }
        }
        off += dp;
      }
    };
  }
  return Tensor(node);
}

Tensor sum(const Tensor& x) {
  const bool rg = want_grad({&x});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  auto node = detail::make_node({1}, {acc}, rg, "sum");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double g = nd.grad[0];
      for (double& d : px.grad) d += g;
    };
  }
  return Tensor(node);
}

Tensor mean(const Tensor& x) {
  const bool rg = want_grad({&x});
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  auto node = detail::make_node({1}, {acc * inv}, rg, "mean");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [inv](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double g = nd.grad[0] * inv;
      for (double& d : px.grad) d += g;
    };
  }
  return Tensor(node);
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size())
    throw DimensionError("sum_axis: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
  std::size_t outer, d, inner;
  split_axis(s, axis, &outer, &d, &inner);
  const bool rg = want_grad({&x});
  std::vector<std::size_t> oshape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) oshape.push_back(s[i]);
  if (oshape.empty()) oshape.push_back(1);

  std::vector<double> out(outer * inner, 0.0);
  const double* v = x.values().data();
  const std::int64_t cells = static_cast<std::int64_t>(outer * inner);
#pragma omp parallel for schedule(static) if (x.size() >= kernels::kParallelCutoff)
  for (std::int64_t ci = 0; ci < cells; ++ci) {
    const std::size_t o = static_cast<std::size_t>(ci) / inner;
    const std::size_t in = static_cast<std::size_t>(ci) % inner;
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) acc += v[(o * d + i) * inner + in];
    out[static_cast<std::size_t>(ci)] = acc;
  }
  auto node = detail::make_node(std::move(oshape), std::move(out), rg, "sum_axis");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [outer, d, inner](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double* g = nd.grad.data();
      double* dst = px.grad.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t in = 0; in < inner; ++in)
            dst[(o * d + i) * inner + in] += g[o * inner + in];
    };
  }
  return Tensor(node);
}

Tensor normalize_rows(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 2) throw DimensionError("normalize_rows: expected a 2D tensor");
  const std::size_t n = s[0], m = s[1];
  const bool rg = want_grad({&x});
  std::vector<double> out(x.size());
  const double* v = x.values().data();
  const std::int64_t rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (x.size() >= kernels::kParallelCutoff)
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = v + static_cast<std::size_t>(r) * m;
    double* orow = out.data() + static_cast<std::size_t>(r) * m;
    double sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) sum += row[j];
    for (std::size_t j = 0; j < m; ++j) orow[j] = row[j] / sum;
  }
  auto node = detail::make_node(s, std::move(out), rg, "normalize_rows");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [n, m](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double* v = px.values.data();
      const double* y = nd.values.data();
      const double* g = nd.grad.data();
      double* dx = px.grad.data();
      const std::int64_t rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::size_t base = static_cast<std::size_t>(r) * m;
        double sum = 0.0;
        for (std::size_t j = 0; j < m; ++j) sum += v[base + j];
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += g[base + j] * y[base + j];
        for (std::size_t j = 0; j < m; ++j)
          dx[base + j] += (g[base + j] - dot) / sum;
      }
    };
  }
  return Tensor(node);
}

Tensor where_mask(const Tensor& mask, const Tensor& a, const Tensor& b) {
  if (mask.shape() != a.shape() || a.shape() != b.shape())
    throw DimensionError("where_mask: all three shapes must match");
  if (mask.requires_grad())
    throw ValueError("where_mask: the mask is a constant and must not require grad");
  const double* mv = mask.values().data();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mv[i] != 0.0 && mv[i] != 1.0)
      throw ValueError("where_mask: mask entries must be exactly 0 or 1");
  const bool rg = want_grad({&a, &b});
  std::vector<double> out(a.size());
  const double* av = a.values().data();
  const double* bv = b.values().data();
  // Straight copies of the selected operand, never arithmetic, so the chosen
  // side comes through bit-identical.
  const std::int64_t n = static_cast<std::int64_t>(a.size());
#pragma omp parallel for schedule(static) if (a.size() >= kernels::kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i)
    out[static_cast<std::size_t>(i)] = (mv[i] == 1.0) ? av[i] : bv[i];
  auto node = detail::make_node(a.shape(), std::move(out), rg, "where_mask");
  if (rg) {
    node->parents = {mask.node(), a.node(), b.node()};
    node->backprop = [](detail::TensorNode& nd) {
      const double* mv = nd.parents[0]->values.data();
      const double* g = nd.grad.data();
      auto& pa = *nd.parents[1];
      auto& pb = *nd.parents[2];
      const std::int64_t n = static_cast<std::int64_t>(nd.values.size());
      if (pa.requires_grad) {
        detail::ensure_grad(pa);
        double* dst = pa.grad.data();
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
        for (std::int64_t i = 0; i < n; ++i)
          if (mv[i] == 1.0) dst[i] += g[i];
      }
      if (pb.requires_grad) {
        detail::ensure_grad(pb);
        double* dst = pb.grad.data();
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
        for (std::int64_t i = 0; i < n; ++i)
          if (mv[i] == 0.0) dst[i] += g[i];
      }
    };
  }
  return Tensor(node);
}

Tensor tile0(const Tensor& x, std::size_t n) {
  if (n == 0) throw DimensionError("tile0: repeat count must be positive");
  const bool rg = want_grad({&x});
  const std::size_t sz = x.size();
  std::vector<std::size_t> oshape;
  oshape.push_back(n);
  for (std::size_t d : x.shape()) oshape.push_back(d);
  std::vector<double> out(n * sz);
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(x.values().data(), sz, out.data() + r * sz);
  auto node = detail::make_node(std::move(oshape), std::move(out), rg, "tile0");
  if (rg) {
    node->parents = {x.node()};
    node->backprop = [n, sz](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double* g = nd.grad.data();
      double* dst = px.grad.data();
      const std::int64_t cells = static_cast<std::int64_t>(sz);
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
      for (std::int64_t i = 0; i < cells; ++i) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) acc += g[r * sz + static_cast<std::size_t>(i)];
        dst[i] += acc;
      }
    };
  }
  return Tensor(node);
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const auto& s = logits.shape();
  if (s.size() != 2) throw DimensionError("cross_entropy: logits must be 2D");
  const std::size_t n = s[0], c = s[1];
  if (labels.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw ValueError("cross_entropy: label " + std::to_string(y) +
                       " outside [0," + std::to_string(c) + ")");
  const bool rg = want_grad({&logits});
  const double* v = logits.values().data();
  std::vector<double> probs(n * c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = v + r * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double e = std::exp(row[j] - mx);
      probs[r * c + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= sum;
    total += mx + std::log(sum) - row[static_cast<std::size_t>(labels[r])];
  }
  const double inv = 1.0 / static_cast<double>(n);
  auto node = detail::make_node({1}, {total * inv}, rg, "cross_entropy");
  if (rg) {
    std::vector<int> lab(labels.begin(), labels.end());
    node->parents = {logits.node()};
    node->backprop = [n, c, inv, probs = std::move(probs),
                      lab = std::move(lab)](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double g = nd.grad[0] * inv;
      double* dst = px.grad.data();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const double onehot = (static_cast<std::size_t>(lab[r]) == j) ? 1.0 : 0.0;
          dst[r * c + j] += g * (probs[r * c + j] - onehot);
        }
    };
  }
  return Tensor(node);
}

Tensor patchify(const Tensor& batch, std::size_t patch) {
  const auto& s = batch.shape();
  if (s.size() != 4)
    throw DimensionError("patchify: expected [n,c,h,w], got " + shape_str(s));
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw DimensionError("patchify: patch " + std::to_string(patch) +
                         " does not divide " + std::to_string(h) + "x" +
                         std::to_string(w));
  const std::size_t ph = h / patch, pw = w / patch;
  const std::size_t patches = ph * pw;
  const std::size_t cols = c * patch * patch;
  const bool rg = want_grad({&batch});
  std::vector<double> out(n * patches * cols);
  const double* v = batch.values().data();
  const std::int64_t rows = static_cast<std::int64_t>(n * patches);
#pragma omp parallel for schedule(static) if (out.size() >= kernels::kParallelCutoff)
  for (std::int64_t ri = 0; ri < rows; ++ri) {
    const std::size_t r = static_cast<std::size_t>(ri);
    const std::size_t smp = r / patches;
    const std::size_t pr = (r % patches) / pw;
    const std::size_t pc = (r % patches) % pw;
    double* orow = out.data() + r * cols;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          orow[ch * patch * patch + dy * patch + dx] =
              v[((smp * c + ch) * h + pr * patch + dy) * w + pc * patch + dx];
  }
  auto node = detail::make_node({n * patches, cols}, std::move(out), rg,
                                "patchify");
  if (rg) {
    node->parents = {batch.node()};
    node->backprop = [n, c, h, w, patch, pw, patches,
                      cols](detail::TensorNode& nd) {
      auto& px = *nd.parents[0];
      if (!px.requires_grad) return;
      detail::ensure_grad(px);
      const double* g = nd.grad.data();
      double* dst = px.grad.data();
      const std::int64_t rows = static_cast<std::int64_t>(n * patches);
      // Bijective index mapping; rows touch disjoint pixels.
#pragma omp parallel for schedule(static) if (nd.values.size() >= kernels::kParallelCutoff)
      for (std::int64_t ri = 0; ri < rows; ++ri) {
        const std::size_t r = static_cast<std::size_t>(ri);
        const std::size_t smp = r / patches;
        const std::size_t pr = (r % patches) / pw;
        const std::size_t pc = (r % patches) % pw;
        const double* grow = g + r * cols;
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t dy = 0; dy < patch; ++dy)
            for (std::size_t dx = 0; dx < patch; ++dx)
              dst[((smp * c + ch) * h + pr * patch + dy) * w + pc * patch + dx] +=
                  grow[ch * patch * patch + dy * patch + dx];
      }
    };
  }
  return Tensor(node);
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ValueError("backward requires a defined scalar loss");
  if (!loss.requires_grad())
    throw ValueError("backward on a tensor that does not require grad");

  // Collect the reachable subgraph, then process strictly by decreasing
  // creation sequence: every node is finished before any of its inputs.
  std::vector<detail::TensorNode*> order;
  std::unordered_set<detail::TensorNode*> seen;
  std::vector<detail::TensorNode*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    detail::TensorNode* cur = stack.back();
    stack.pop_back();
    order.push_back(cur);
    for (const auto& p : cur->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const detail::TensorNode* a, const detail::TensorNode* b) {
              return a->seq > b->seq;
            });

  detail::ensure_grad(*loss.node());
  loss.node()->grad[0] = 1.0;

  for (detail::TensorNode* nd : order) {
    if (nd->grad.empty()) continue;  // no gradient flowed here
    if (nd->backprop) nd->backprop(*nd);
  }

  for (detail::TensorNode* nd : order) {
    if (nd->backprop || !nd->requires_grad || nd->grad.empty()) continue;
    for (double gv : nd->grad)
      if (!std::isfinite(gv))
        throw NumericError("non-finite gradient reached a leaf tensor");
  }
}

}  // namespace vitbd
