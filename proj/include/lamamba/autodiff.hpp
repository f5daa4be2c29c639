#pragma once

// Reverse-mode differentiation over whole-tensor primitives.
//
// Every op eagerly computes its value and, when any input requires a
// gradient, records a closure that maps the output gradient to input
// gradients. `grad()` walks the recorded graph in reverse topological order.

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lamamba/tensor.hpp"

namespace lamamba::ad {

struct Node {
  Tensor value;
  Tensor grad;  // scratch, only populated during a backward pass
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  std::string name;

  Tensor& grad_buffer();
};

/// Handle to a graph node. Cheap to copy; copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  /// In-place access for optimizers and finite-difference probes. Only
  /// meaningful on leaves.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Tensor t);
Var parameter(Tensor t, std::string name = {});
/// Same value, no gradient flows back through it.
Var detach(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
/// a[..., D] + b[D]; b may also have any trailing-suffix shape of a.
Var add_bcast(const Var& a, const Var& b);
Var mul_bcast(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// a + c for a constant tensor c (masks, fixed offsets).
Var add_const(const Var& a, const Tensor& c);

Var linear(const Var& x, const Var& w, const Var& b = {});
/// Batched matmul: a[B,m,k] x b[B,k,n] (or b[B,n,k] when trans_b).
Var bmm(const Var& a, const Var& b, bool trans_b = false);

Var exp(const Var& a);
Var square(const Var& a);
Var silu(const Var& a);
Var gelu(const Var& a);
Var softplus(const Var& a);
Var softmax(const Var& a);
Var layer_norm(const Var& a, double eps = kLayerNormEps);

Var sum(const Var& a);
Var mean(const Var& a);

/// out.flat[i] = index[i] < 0 ? 0 : a.flat[index[i]]. Backward scatter-adds.
Var gather(const Var& a, std::vector<std::int64_t> index, Shape out_shape);
Var reshape(const Var& a, Shape shape);
/// Slice [start, start+len) along the last axis.
Var slice_last(const Var& a, std::int64_t start, std::int64_t len);

/// Depthwise 3x3 convolution with zero padding 1. x[H,W,E], w[3,3,E], b[E].
Var depthwise_conv3x3(const Var& x, const Var& w, const Var& b);

/// Registers a custom op. `backward` receives the finished node.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Gradients of a scalar `loss` with respect to each entry of `wrt`.
/// Entries unreachable from `loss` get zero tensors of their shape.
std::vector<Tensor> grad(const Var& loss, std::span<const Var> wrt);

struct FiniteDiffOptions {
  double h = 1e-5;
  /// 2: (f(+h) - f(-h)) / 2h.  4: the fourth-order stencil
  /// (8(f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h, for losses whose rounding
  /// noise ulp(f)/h swamps small gradients at the short step.
  int stencil = 2;
  /// When set, only this many randomly chosen coordinates are probed.
  std::optional<std::int64_t> max_coords;
  std::uint64_t seed = 0;
};

struct FiniteDiffResult {
  double max_rel_error = 0.0;
  std::int64_t coords_checked = 0;
};

/// Central-difference check of backward on `f` at `theta`.
/// Returns max_i |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
FiniteDiffResult finite_diff_check(const std::function<Var(const Var&)>& f, const Tensor& theta,
                                   const FiniteDiffOptions& opts = {});

/// Same check where the probed tensor is an existing leaf `param` consumed by
/// `loss_fn`; the leaf is perturbed in place and restored afterwards.
FiniteDiffResult finite_diff_check_param(const std::function<Var()>& loss_fn, Var param,
                                         const FiniteDiffOptions& opts = {});

double relative_error(double a, double b);

// AdamW with decoupled weight decay and bias correction.
struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

AdamWState adamw_init(std::span<const Var> params);
/// Updates `params` in place. `names` labels errors for non-finite gradients.
void adamw_step(std::span<Var> params, std::span<const Tensor> grads, AdamWState& state,
                const AdamWConfig& cfg, std::span<const std::string> names = {});

namespace testing {
/// Negative-control hook: when set, silu's backward is scaled by 1.01.
void set_corrupt_backward(bool on);
bool corrupt_backward();
}  // namespace testing

}  // namespace lamamba::ad
