#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vitbd/errors.hpp"

namespace vitbd {

namespace detail {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One record of the compute graph. Nodes are created in program order and
// carry a monotonically increasing sequence number; backward() walks the
// subgraph reachable from the loss in decreasing sequence order, which is
// exactly reverse insertion order.
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until backward needs it
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backprop;

  std::size_t size() const { return values.size(); }
};

NodePtr make_node(std::vector<std::size_t> shape, std::vector<double> values,
                  bool requires_grad, const char* op);
void ensure_grad(TensorNode& n);

}  // namespace detail

// Disables graph recording for the current thread while alive. Forward
// evaluation under a guard produces plain value tensors.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Dense row-major double tensor with optional reverse-mode gradient.
// Value-semantics handle over a shared node; ops produce new tensors and,
// when gradients are enabled and required, record how to push gradients
// back to their inputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape,
                          std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  double item() const;  // scalar tensors only
  double value_at(std::size_t linear_index) const;
  double at(std::initializer_list<std::size_t> index) const;

  std::span<const double> values() const;
  // Mutable access to a leaf's storage (parameters, trigger patterns).
  // Throws ValueError on non-leaf tensors: mutating an op output would
  // silently desynchronize recorded gradients.
  std::span<double> raw_values();

  bool requires_grad() const;
  void set_requires_grad(bool rg);  // leaves only
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Value copy detached from any graph.
  Tensor detach() const;
  // Deep copy (values + requires_grad), no graph history.
  Tensor clone() const;

  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

 private:
  detail::NodePtr node_;
};

// ---- operations ----------------------------------------------------------

// 2D [n,k]x[k,m] -> [n,m], or batched 3D [B,n,k]x[B,k,m] -> [B,n,m].
Tensor matmul(const Tensor& a, const Tensor& b);

// Max-subtracted softmax along `axis`; slices sum to 1.
Tensor softmax(const Tensor& x, std::size_t axis);

// Normalizes the last axis; gain/bias have that axis's length.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps = 1e-5);

// Exact erf-based GELU.
Tensor gelu(const Tensor& x);

// Same-shape elementwise add, or bias add of a rank-1 tensor along the last
// axis. No other broadcasting exists.
Tensor add(const Tensor& a, const Tensor& b);

// Same-shape elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double c);

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len);
Tensor concat(std::span<const Tensor> xs, std::size_t axis);

Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
// Sums out one axis: [.., d_axis, ..] -> [.., ..].
Tensor sum_axis(const Tensor& x, std::size_t axis);

// Divides each row of a 2D tensor by its sum.
Tensor normalize_rows(const Tensor& x);

// out[i] = a[i] where mask[i]==1 else b[i]; mask entries must be exactly
// 0 or 1 and the selected values are copied bit-for-bit.
Tensor where_mask(const Tensor& mask, const Tensor& a, const Tensor& b);

// Repeats x n times along a new leading axis; gradient sums the copies.
Tensor tile0(const Tensor& x, std::size_t n);

// Mean over samples of logsumexp(logits_i) - logits_i[label_i].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

// [n,c,h,w] -> [n*patches, c*p*p]; rows ordered sample-major then patch
// row-major, columns channel-major.
Tensor patchify(const Tensor& batch, std::size_t patch);

// Composite helpers (pure op compositions).
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mse(const Tensor& a, const Tensor& b);

// Reverse-mode sweep from a scalar loss. Accumulates (sums) gradients into
// every requires_grad tensor in the reachable subgraph; callers zero grads
// between steps.
void backward(const Tensor& loss);

}  // namespace vitbd
