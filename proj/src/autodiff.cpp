#include "lamamba/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "gemm.hpp"

namespace lamamba::ad {

namespace {
thread_local bool g_grad_enabled = true;
bool g_corrupt_backward = false;

bool any_requires_grad(const std::vector<Var>& inputs) {
  for (const auto& v : inputs)
    if (v.requires_grad()) return true;
  return false;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

std::int64_t suffix_inner(const Shape& a, const Shape& b, const char* op) {
  if (b.size() > a.size() || !std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    throw DimensionError(std::string(op) + ": " + shape_str(b) + " is not a trailing suffix of " +
                         shape_str(a));
  }
  return numel_of(b);
}

Tensor& in_grad(Node& n, std::size_t i) { return n.inputs[i]->grad_buffer(); }
bool wants(const Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.shape() != value.shape() || grad.numel() != value.numel()) grad = Tensor(value.shape());
  return grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace testing {
void set_corrupt_backward(bool on) { g_corrupt_backward = on; }
bool corrupt_backward() { return g_corrupt_backward; }
}  // namespace testing

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled && any_requires_grad(inputs)) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& v : inputs) n->inputs.push_back(v.ptr());
    n->backward = std::move(backward);
  }
  return Var(std::move(n));
}

Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return Var(std::move(n));
}

Var parameter(Tensor t, std::string name) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  n->name = std::move(name);
  return Var(std::move(n));
}

Var detach(const Var& x) { return constant(x.value()); }

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(n, k)) continue;
      auto& g = in_grad(n, k);
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& n) {
    if (wants(n, 0)) {
      auto& g = in_grad(n, 0);
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (wants(n, 1)) {
      auto& g = in_grad(n, 1);
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  return make_op(std::move(y), {a, b}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (wants(n, 0)) {
      auto& g = in_grad(n, 0);
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (wants(n, 1)) {
      auto& g = in_grad(n, 1);
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

Var add_bcast(const Var& a, const Var& b) {
  const std::int64_t inner = suffix_inner(a.shape(), b.shape(), "add_bcast");
  Tensor y = a.value();
  const double* bp = b.value().ptr();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += bp[i % inner];
  return make_op(std::move(y), {a, b}, [inner](Node& n) {
    if (wants(n, 0)) {
      auto& g = in_grad(n, 0);
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (wants(n, 1)) {
      auto& g = in_grad(n, 1);
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i % inner] += n.grad[i];
    }
  });
}

Var mul_bcast(const Var& a, const Var& b) {
  const std::int64_t inner = suffix_inner(a.shape(), b.shape(), "mul_bcast");
  Tensor y = a.value();
  const double* bp = b.value().ptr();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] *= bp[i % inner];
  return make_op(std::move(y), {a, b}, [inner](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (wants(n, 0)) {
      auto& g = in_grad(n, 0);
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i % inner];
    }
    if (wants(n, 1)) {
      auto& g = in_grad(n, 1);
      for (std::int64_t i = 0; i < n.grad.numel(); ++i) g[i % inner] += n.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor y = a.value();
  for (auto& v : y.data()) v *= s;
  ensure_finite(y, "scale");
  return make_op(std::move(y), {a}, [s](Node& n) {
    auto& g = in_grad(n, 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += s * n.grad[i];
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor y = a.value();
  for (auto& v : y.data()) v += s;
  return make_op(std::move(y), {a}, [](Node& n) {
    auto& g = in_grad(n, 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

Var add_const(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape()) throw DimensionError("add_const: shape mismatch");
  Tensor y = a.value();
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += c[i];
  return make_op(std::move(y), {a}, [](Node& n) {
    auto& g = in_grad(n, 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Matrix products

Var linear(const Var& x, const Var& w, const Var& b) {
  Tensor y = lamamba::linear(x.value(), w.value(), b.defined() ? b.value() : Tensor{});
  std::vector<Var> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_op(std::move(y), std::move(inputs), [](Node& n) {
    const Tensor& xv = n.inputs[0]->value;
    const Tensor& wv = n.inputs[1]->value;
    const std::int64_t din = wv.dim(0);
    const std::int64_t dout = wv.dim(1);
    const std::int64_t rows = din == 0 ? 0 : xv.numel() / din;
    const double* gy = n.grad.ptr();
    if (wants(n, 0)) detail::gemm_acc(gy, false, wv.ptr(), true, in_grad(n, 0).ptr(), rows, dout, din);
    if (wants(n, 1)) detail::gemm_acc(xv.ptr(), true, gy, false, in_grad(n, 1).ptr(), din, rows, dout);
    if (n.inputs.size() > 2 && wants(n, 2)) {
      double* gb = in_grad(n, 2).ptr();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < dout; ++j) gb[j] += gy[r * dout + j];
    }
  });
}


Var bmm(const Var& a, const Var& b, bool trans_b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0]) {
    throw DimensionError("bmm expects rank-3 operands with equal batch, got " + shape_str(as) +
                         " and " + shape_str(bs));
  }
  const std::int64_t batch = as[0], m = as[1], k = as[2];
  const std::int64_t n = trans_b ? bs[1] : bs[2];
  if ((trans_b ? bs[2] : bs[1]) != k) {
    throw DimensionError("bmm inner extent mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  Tensor y(Shape{batch, m, n});
  for (std::int64_t t = 0; t < batch; ++t) {
    detail::gemm_acc(a.value().ptr() + t * m * k, false, b.value().ptr() + t * k * n, trans_b,
                     y.ptr() + t * m * n, m, k, n);
  }
  return make_op(std::move(y), {a, b}, [batch, m, k, n, trans_b](Node& nd) {
    const double* av = nd.inputs[0]->value.ptr();
    const double* bv = nd.inputs[1]->value.ptr();
    const double* gy = nd.grad.ptr();
    if (wants(nd, 0)) {
      double* ga = in_grad(nd, 0).ptr();
      for (std::int64_t t = 0; t < batch; ++t) {
        const double* g = gy + t * m * n;
        const double* bb = bv + t * k * n;
        double* gat = ga + t * m * k;
        // ga[m,k] += g[m,n] B^T when B is [k,n], g B when B is [n,k]
        detail::gemm_acc(g, false, bb, !trans_b, gat, m, n, k);
      }
    }
    if (wants(nd, 1)) {
      double* gb = in_grad(nd, 1).ptr();
      for (std::int64_t t = 0; t < batch; ++t) {
        const double* g = gy + t * m * n;
        const double* aa = av + t * m * k;
        double* gbt = gb + t * k * n;
        if (!trans_b) detail::gemm_acc(aa, true, g, false, gbt, k, m, n);  // A^T g
        else detail::gemm_acc(g, true, aa, false, gbt, n, m, k);           // g^T A
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

Var exp(const Var& a) {
  Tensor y = a.value();
  for (auto& v : y.data()) v = std::exp(v);
  ensure_finite(y, "exp");
  return make_op(std::move(y), {a}, [](Node& n) {
    auto& g = in_grad(n, 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * n.value[i];
  });
}

Var square(const Var& a) {
  Tensor y = a.value();
  for (auto& v : y.data()) v = v * v;
  ensure_finite(y, "square");
  return make_op(std::move(y), {a}, [](Node& n) {
    const Tensor& x = n.inputs[0]->value;
    auto& g = in_grad(n, 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += 2.0 * x[i] * n.grad[i];
  });
}

Var silu(const Var& a) {
  return make_op(lamamba::silu(a.value()), {a}, [](Node& n) {
    const Tensor& x = n.inputs[0]->value;
    auto& g = in_grad(n, 0);
    const double corrupt = g_corrupt_backward ? 1.01 : 1.0;
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-x[i]));
      g[i] += corrupt * n.grad[i] * (s + x[i] * s * (1.0 - s));
    }
  });
}

Var gelu(const Var& a) {
  return make_op(lamamba::gelu(a.value()), {a}, [](Node& n) {
    constexpr double k = 0.7978845608028654;
    const Tensor& x = n.inputs[0]->value;
    auto& g = in_grad(n, 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const double v = x[i];
      const double t = std::tanh(k * (v + 0.044715 * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * v * v);
      g[i] += n.grad[i] * d;
    }
  });
}

Var softplus(const Var& a) {
  return make_op(lamamba::softplus(a.value()), {a}, [](Node& n) {
    const Tensor& x = n.inputs[0]->value;
    auto& g = in_grad(n, 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / (1.0 + std::exp(-x[i]));
  });
}

Var softmax(const Var& a) {
  return make_op(lamamba::softmax(a.value()), {a}, [](Node& n) {
    const std::int64_t k = n.value.dim(-1);
    const std::int64_t rows = n.value.numel() / k;
    auto& g = in_grad(n, 0);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = n.value.ptr() + r * k;
      const double* gy = n.grad.ptr() + r * k;
      double dot = 0.0;
      for (std::int64_t i = 0; i < k; ++i) dot += gy[i] * y[i];
      double* gx = g.ptr() + r * k;
      for (std::int64_t i = 0; i < k; ++i) gx[i] += y[i] * (gy[i] - dot);
    }
  });
}

Var layer_norm(const Var& a, double eps) {
  Tensor y = lamamba::layer_norm(a.value(), eps);
  return make_op(std::move(y), {a}, [eps](Node& n) {
    const Tensor& x = n.inputs[0]->value;
    const std::int64_t d = x.dim(-1);
    const std::int64_t rows = x.numel() / d;
    auto& g = in_grad(n, 0);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = x.ptr() + r * d;
      const double* yr = n.value.ptr() + r * d;
      const double* gy = n.grad.ptr() + r * d;
      double mean = 0.0;
      for (std::int64_t i = 0; i < d; ++i) mean += xr[i];
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (std::int64_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
      var /= static_cast<double>(d);
      const double denom = std::sqrt(var + eps);
      if (!(denom > 0.0)) continue;
      double mg = 0.0, mgy = 0.0;
      for (std::int64_t i = 0; i < d; ++i) {
        mg += gy[i];
        mgy += gy[i] * yr[i];
      }
      mg /= static_cast<double>(d);
      mgy /= static_cast<double>(d);
      double* gx = g.ptr() + r * d;
      for (std::int64_t i = 0; i < d; ++i) gx[i] += (gy[i] - mg - yr[i] * mgy) / denom;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and layout

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_op(Tensor::scalar(s), {a}, [](Node& n) {
    auto& g = in_grad(n, 0);
    const double gs = n.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += gs;
  });
}

Var mean(const Var& a) {
  if (a.value().numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().numel()));
}

Var gather(const Var& a, std::vector<std::int64_t> index, Shape out_shape) {
  if (numel_of(out_shape) != static_cast<std::int64_t>(index.size())) {
    throw DimensionError("gather: index length does not match output shape " + shape_str(out_shape));
  }
  const std::int64_t n_in = a.value().numel();
  Tensor y(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto src = index[i];
    if (src >= n_in) throw DimensionError("gather: index out of range");
    y[static_cast<std::int64_t>(i)] = src < 0 ? 0.0 : a.value()[src];
  }
  return make_op(std::move(y), {a}, [index = std::move(index)](Node& n) {
    auto& g = in_grad(n, 0);
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] >= 0) g[index[i]] += n.grad[static_cast<std::int64_t>(i)];
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  return make_op(std::move(y), {a}, [](Node& n) {
    auto& g = in_grad(n, 0);
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

Var slice_last(const Var& a, std::int64_t start, std::int64_t len) {
  const std::int64_t d = a.value().dim(-1);
  if (start < 0 || len < 0 || start + len > d) throw DimensionError("slice_last out of range");
  const std::int64_t rows = a.value().numel() / d;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(rows * len));
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < len; ++j) idx[r * len + j] = r * d + start + j;
  Shape s = a.shape();
  s.back() = len;
  return gather(a, std::move(idx), std::move(s));
}

Var depthwise_conv3x3(const Var& x, const Var& w, const Var& b) {
  const auto& xs = x.shape();
  if (xs.size() != 3) throw DimensionError("depthwise_conv3x3 expects [H,W,E], got " + shape_str(xs));
  const std::int64_t H = xs[0], W = xs[1], E = xs[2];
  if (w.shape() != Shape{3, 3, E} || b.shape() != Shape{E}) {
    throw DimensionError("depthwise_conv3x3 weight/bias shape mismatch");
  }
  Tensor y(xs);
  const double* xp = x.value().ptr();
  const double* wp = w.value().ptr();
  const double* bp = b.value().ptr();
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j) {
      double* yr = y.ptr() + (i * W + j) * E;
      std::copy(bp, bp + E, yr);
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const std::int64_t ii = i + di, jj = j + dj;
          if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
          const double* xr = xp + (ii * W + jj) * E;
          const double* wr = wp + ((di + 1) * 3 + (dj + 1)) * E;
          for (std::int64_t e = 0; e < E; ++e) yr[e] += wr[e] * xr[e];
        }
    }
  ensure_finite(y, "depthwise_conv3x3");
  return make_op(std::move(y), {x, w, b}, [H, W, E](Node& n) {
    const double* xp = n.inputs[0]->value.ptr();
    const double* wp = n.inputs[1]->value.ptr();
    double* gx = wants(n, 0) ? in_grad(n, 0).ptr() : nullptr;
    double* gw = wants(n, 1) ? in_grad(n, 1).ptr() : nullptr;
    double* gb = wants(n, 2) ? in_grad(n, 2).ptr() : nullptr;
    for (std::int64_t i = 0; i < H; ++i)
      for (std::int64_t j = 0; j < W; ++j) {
        const double* gy = n.grad.ptr() + (i * W + j) * E;
        if (gb)
          for (std::int64_t e = 0; e < E; ++e) gb[e] += gy[e];
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const std::int64_t ii = i + di, jj = j + dj;
            if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
            const std::int64_t tap = ((di + 1) * 3 + (dj + 1)) * E;
            const std::int64_t src = (ii * W + jj) * E;
            for (std::int64_t e = 0; e < E; ++e) {
              if (gx) gx[src + e] += wp[tap + e] * gy[e];
              if (gw) gw[tap + e] += xp[src + e] * gy[e];
            }
          }
      }
  });
}

// ---------------------------------------------------------------------------
// Backward pass

std::vector<Tensor> grad(const Var& loss, std::span<const Var> wrt) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw ContractError("grad: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  std::vector<Node*> order;
  if (loss.requires_grad()) {
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
    seen.insert(loss.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    loss.node()->grad_buffer()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && n->grad.numel() == n->value.numel()) n->backward(*n);
    }
  }
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& v : wrt) {
    const Node* n = v.node();
    if (n->grad.numel() == n->value.numel() && n->grad.shape() == n->value.shape()) {
      out.push_back(n->grad);
    } else {
      out.emplace_back(v.shape());
    }
  }
  for (Node* n : order) n->grad = Tensor();
  return out;
}

double relative_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

namespace {
std::vector<std::int64_t> pick_coords(std::int64_t n, const FiniteDiffOptions& opts) {
  std::vector<std::int64_t> coords(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) coords[i] = i;
  if (opts.max_coords && *opts.max_coords < n) {
    Rng rng(opts.seed);
    // Partial Fisher-Yates.
    for (std::int64_t i = 0; i < *opts.max_coords; ++i) {
      const auto j = rng.uniform_int(i, n - 1);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(static_cast<std::size_t>(*opts.max_coords));
  }
  return coords;
}

// `at(d)` evaluates the function with the probed coordinate moved by d.
template <class Eval>
double central_diff(const Eval& at, const FiniteDiffOptions& opts) {
  const double h = opts.h;
  if (opts.stencil == 2) return (at(h) - at(-h)) / (2.0 * h);
  if (opts.stencil == 4) return (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
  throw ContractError("finite-difference stencil must be 2 or 4, got " + std::to_string(opts.stencil));
}
}  // namespace

FiniteDiffResult finite_diff_check(const std::function<Var(const Var&)>& f, const Tensor& theta,
                                   const FiniteDiffOptions& opts) {
  Var p = parameter(theta);
  Var loss = f(p);
  const Var wrt[] = {p};
  const Tensor g_ad = grad(loss, wrt)[0];
  FiniteDiffResult res;
  NoGradGuard ng;
  for (auto i : pick_coords(theta.numel(), opts)) {
    const double g_fd = central_diff(
        [&](double d) {
          Tensor moved = theta;
          moved[i] += d;
          return f(constant(moved)).value().item();
        },
        opts);
    res.max_rel_error = std::max(res.max_rel_error, relative_error(g_ad[i], g_fd));
    ++res.coords_checked;
  }
  return res;
}

FiniteDiffResult finite_diff_check_param(const std::function<Var()>& loss_fn, Var param,
                                         const FiniteDiffOptions& opts) {
  const Var wrt[] = {param};
  const Tensor g_ad = grad(loss_fn(), wrt)[0];
  FiniteDiffResult res;
  NoGradGuard ng;
  Tensor& theta = param.mutable_value();
  for (auto i : pick_coords(theta.numel(), opts)) {
    const double orig = theta[i];
    const double g_fd = central_diff(
        [&](double d) {
          theta[i] = orig + d;
          const double v = loss_fn().value().item();
          theta[i] = orig;
          return v;
        },
        opts);
    res.max_rel_error = std::max(res.max_rel_error, relative_error(g_ad[i], g_fd));
    ++res.coords_checked;
  }
  return res;
}

// ---------------------------------------------------------------------------
// AdamW

AdamWState adamw_init(std::span<const Var> params) {
  AdamWState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.shape());
    s.v.emplace_back(p.shape());
  }
  return s;
}

void adamw_step(std::span<Var> params, std::span<const Tensor> grads, AdamWState& state,
                const AdamWConfig& cfg, std::span<const std::string> names) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw ContractError("adamw_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (double g : grads[k].data()) {
      if (!std::isfinite(g)) {
        const std::string who = k < names.size() ? names[k] : params[k].name();
        throw TrainingError("non-finite gradient for parameter '" + who + "'");
      }
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& theta = params[k].mutable_value();
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    const Tensor& g = grads[k];
    for (std::int64_t i = 0; i < theta.numel(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
      theta[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace lamamba::ad
