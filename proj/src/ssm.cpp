#include "lamamba/ssm.hpp"

#include <cmath>

namespace lamamba::ssm {

using ad::Node;
using ad::Var;

namespace {

Tensor& in_grad(Node& n, std::size_t i) { return n.inputs[i]->grad_buffer(); }
bool wants(const Node& n, std::size_t i) { return n.inputs[i]->requires_grad; }

// psi(z) = expm1(z) / z and its derivative, stable near z = 0.
double psi(double z) { return std::abs(z) < 1e-5 ? 1.0 + z / 2.0 + z * z / 6.0 : std::expm1(z) / z; }
double dpsi(double z) {
  if (std::abs(z) < 1e-4) return 0.5 + z / 3.0 + z * z / 8.0;
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

}  // namespace

DiscretizedPair zoh_discretize(const Var& a, const Var& delta, const Var& b, ZohMode mode) {
  const auto& as = a.shape();
  const auto& ds = delta.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || ds.size() != 2 || bs.size() != 2 || ds[1] != as[0] || bs[0] != ds[0] ||
      bs[1] != as[1]) {
    throw DimensionError("zoh_discretize: expected a[E,N], delta[L,E], b[L,N]; got " +
                         shape_str(as) + ", " + shape_str(ds) + ", " + shape_str(bs));
  }
  for (double v : delta.value().data()) {
    if (!(v > 0.0)) throw ContractError("zoh_discretize: step size delta must be positive");
  }
  const std::int64_t L = ds[0], E = as[0], N = as[1];
  const double* av = a.value().ptr();
  const double* dv = delta.value().ptr();
  const double* bv = b.value().ptr();

  Tensor abar(Shape{L, E, N});
  for (std::int64_t t = 0; t < L; ++t)
    for (std::int64_t e = 0; e < E; ++e)
      for (std::int64_t n = 0; n < N; ++n)
        abar[(t * E + e) * N + n] = std::exp(dv[t * E + e] * av[e * N + n]);
  ensure_finite(abar, "zoh_discretize");

  Var a_bar = ad::make_op(std::move(abar), {a, delta}, [L, E, N](Node& nd) {
    const double* av = nd.inputs[0]->value.ptr();
    const double* dv = nd.inputs[1]->value.ptr();
    double* ga = wants(nd, 0) ? in_grad(nd, 0).ptr() : nullptr;
    double* gd = wants(nd, 1) ? in_grad(nd, 1).ptr() : nullptr;
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t e = 0; e < E; ++e)
        for (std::int64_t n = 0; n < N; ++n) {
          const std::int64_t k = (t * E + e) * N + n;
          const double g = nd.grad[k] * nd.value[k];
          if (ga) ga[e * N + n] += g * dv[t * E + e];
          if (gd) gd[t * E + e] += g * av[e * N + n];
        }
  });

  Tensor bbar(Shape{L, E, N});
  if (mode == ZohMode::simplified) {
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t e = 0; e < E; ++e)
        for (std::int64_t n = 0; n < N; ++n) bbar[(t * E + e) * N + n] = dv[t * E + e] * bv[t * N + n];
    ensure_finite(bbar, "zoh_discretize");
    Var b_bar = ad::make_op(std::move(bbar), {delta, b}, [L, E, N](Node& nd) {
      const double* dv = nd.inputs[0]->value.ptr();
      const double* bv = nd.inputs[1]->value.ptr();
      double* gd = wants(nd, 0) ? in_grad(nd, 0).ptr() : nullptr;
      double* gb = wants(nd, 1) ? in_grad(nd, 1).ptr() : nullptr;
      for (std::int64_t t = 0; t < L; ++t)
        for (std::int64_t e = 0; e < E; ++e)
          for (std::int64_t n = 0; n < N; ++n) {
            const double g = nd.grad[(t * E + e) * N + n];
            if (gd) gd[t * E + e] += g * bv[t * N + n];
            if (gb) gb[t * N + n] += g * dv[t * E + e];
          }
    });
    return {a_bar, b_bar};
  }

  // Full ZOH: b_bar = B * delta * psi(delta * A).
  for (std::int64_t t = 0; t < L; ++t)
    for (std::int64_t e = 0; e < E; ++e)
      for (std::int64_t n = 0; n < N; ++n) {
        const double d = dv[t * E + e];
        bbar[(t * E + e) * N + n] = bv[t * N + n] * d * psi(d * av[e * N + n]);
      }
  ensure_finite(bbar, "zoh_discretize");
  Var b_bar = ad::make_op(std::move(bbar), {a, delta, b}, [L, E, N](Node& nd) {
    const double* av = nd.inputs[0]->value.ptr();
    const double* dv = nd.inputs[1]->value.ptr();
    const double* bv = nd.inputs[2]->value.ptr();
    double* ga = wants(nd, 0) ? in_grad(nd, 0).ptr() : nullptr;
    double* gd = wants(nd, 1) ? in_grad(nd, 1).ptr() : nullptr;
    double* gb = wants(nd, 2) ? in_grad(nd, 2).ptr() : nullptr;
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t e = 0; e < E; ++e)
        for (std::int64_t n = 0; n < N; ++n) {
          const double g = nd.grad[(t * E + e) * N + n];
          const double d = dv[t * E + e];
          const double an = av[e * N + n];
          const double z = d * an;
          const double bb = bv[t * N + n];
          // d/dΔ [Δ psi(ΔA)] = exp(ΔA);  d/dA [Δ psi(ΔA)] = Δ² psi'(ΔA)
          if (gd) gd[t * E + e] += g * bb * std::exp(z);
          if (ga) ga[e * N + n] += g * bb * d * d * dpsi(z);
          if (gb) gb[t * N + n] += g * d * psi(z);
        }
  });
  return {a_bar, b_bar};
}

Var selective_scan(const Var& x, const Var& a_bar, const Var& b_bar, const Var& c, const Var& d_skip) {
  const auto& xs = x.shape();
  if (xs.size() != 2) throw DimensionError("selective_scan: x must be [L,E], got " + shape_str(xs));
  const std::int64_t L = xs[0], E = xs[1];
  if (c.shape().size() != 2 || c.shape()[0] != L) {
    throw DimensionError("selective_scan: c must be [L,N], got " + shape_str(c.shape()));
  }
  const std::int64_t N = c.shape()[1];
  if (a_bar.shape() != Shape{L, E, N} || b_bar.shape() != Shape{L, E, N} || d_skip.shape() != Shape{E}) {
    throw DimensionError("selective_scan: inconsistent a_bar/b_bar/d shapes");
  }
  const double* xv = x.value().ptr();
  const double* av = a_bar.value().ptr();
  const double* bv = b_bar.value().ptr();
  const double* cv = c.value().ptr();
  const double* dv = d_skip.value().ptr();

  // Hidden states for every step are kept for the backward pass.
  auto states = std::make_shared<std::vector<double>>(static_cast<std::size_t>(L * E * N), 0.0);
  Tensor y(Shape{L, E});
  std::vector<double> h(static_cast<std::size_t>(E * N), 0.0);
  for (std::int64_t t = 0; t < L; ++t) {
    const double* ct = cv + t * N;
    for (std::int64_t e = 0; e < E; ++e) {
      const double xte = xv[t * E + e];
      const double* at = av + (t * E + e) * N;
      const double* bt = bv + (t * E + e) * N;
      double* he = h.data() + e * N;
      double acc = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        he[n] = at[n] * he[n] + bt[n] * xte;
        acc += ct[n] * he[n];
      }
      y[t * E + e] = acc + dv[e] * xte;
    }
    std::copy(h.begin(), h.end(), states->begin() + t * E * N);
  }
  ensure_finite(y, "selective_scan");

  return ad::make_op(std::move(y), {x, a_bar, b_bar, c, d_skip}, [L, E, N, states](Node& nd) {
    const double* xv = nd.inputs[0]->value.ptr();
    const double* av = nd.inputs[1]->value.ptr();
    const double* bv = nd.inputs[2]->value.ptr();
    const double* cv = nd.inputs[3]->value.ptr();
    const double* dv = nd.inputs[4]->value.ptr();
    double* gx = wants(nd, 0) ? in_grad(nd, 0).ptr() : nullptr;
    double* ga = wants(nd, 1) ? in_grad(nd, 1).ptr() : nullptr;
    double* gb = wants(nd, 2) ? in_grad(nd, 2).ptr() : nullptr;
    double* gc = wants(nd, 3) ? in_grad(nd, 3).ptr() : nullptr;
    double* gd = wants(nd, 4) ? in_grad(nd, 4).ptr() : nullptr;
    const double* gy = nd.grad.ptr();
    const double* hs = states->data();
    std::vector<double> dh(static_cast<std::size_t>(E * N), 0.0);  // carry from t+1
    for (std::int64_t t = L - 1; t >= 0; --t) {
      const double* ct = cv + t * N;
      const double* ht = hs + t * E * N;
      const double* hprev = t > 0 ? hs + (t - 1) * E * N : nullptr;
      for (std::int64_t e = 0; e < E; ++e) {
        const double g = gy[t * E + e];
        const double xte = xv[t * E + e];
        if (gd) gd[e] += g * xte;
        double gxa = g * dv[e];
        double* dhe = dh.data() + e * N;
        const double* at = av + (t * E + e) * N;
        const double* bt = bv + (t * E + e) * N;
        for (std::int64_t n = 0; n < N; ++n) {
          const double hten = ht[e * N + n];
          if (gc) gc[t * N + n] += g * hten;
          const double total = dhe[n] + g * ct[n];
          if (ga && hprev) ga[(t * E + e) * N + n] += total * hprev[e * N + n];
          if (gb) gb[(t * E + e) * N + n] += total * xte;
          gxa += total * bt[n];
          dhe[n] = total * at[n];
        }
        if (gx) gx[t * E + e] += gxa;
      }
    }
  });
}

Var scan_along_path(const Var& x, const Var& delta, const Var& a, const Var& b, const Var& c,
                    const Var& d_skip, const ScanPath& path, ZohMode mode) {
  const auto& xs = x.shape();
  if (xs.size() != 2) throw DimensionError("scan_along_path: x must be [L,E], got " + shape_str(xs));
  const std::int64_t L = xs[0], E = xs[1];
  if (a.shape().size() != 2 || a.shape()[0] != E) {
    throw DimensionError("scan_along_path: a must be [E,N], got " + shape_str(a.shape()));
  }
  const std::int64_t N = a.shape()[1];
  if (delta.shape() != Shape{L, E} || b.shape() != Shape{L, N} || c.shape() != Shape{L, N} ||
      d_skip.shape() != Shape{E} || static_cast<std::int64_t>(path.order.size()) != L) {
    throw DimensionError("scan_along_path: inconsistent operand shapes");
  }
  for (double v : delta.value().data()) {
    if (!(v > 0.0)) throw ContractError("zoh_discretize: step size delta must be positive");
  }
  const bool full = mode == ZohMode::full;
  const double* xv = x.value().ptr();
  const double* dv = delta.value().ptr();
  const double* av = a.value().ptr();
  const double* bv = b.value().ptr();
  const double* cv = c.value().ptr();
  const double* sv = d_skip.value().ptr();

  // Per step: discretized a and b, and the state after the step.
  const auto count = static_cast<std::size_t>(L * E * N);
  auto abar = std::make_shared<std::vector<double>>(count);
  auto bbar = std::make_shared<std::vector<double>>(count);
  auto states = std::make_shared<std::vector<double>>(count);
  Tensor y(Shape{L, E});
  std::vector<double> h(static_cast<std::size_t>(E * N), 0.0);
  for (std::int64_t t = 0; t < L; ++t) {
    const std::int64_t cell = path.order[t];
    const double* ct = cv + cell * N;
    const double* bt = bv + cell * N;
    for (std::int64_t e = 0; e < E; ++e) {
      const double d = dv[cell * E + e];
      const double xte = xv[cell * E + e];
      double* ab = abar->data() + (t * E + e) * N;
      double* bb = bbar->data() + (t * E + e) * N;
      double* he = h.data() + e * N;
      double acc = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        ab[n] = std::exp(d * av[e * N + n]);
        bb[n] = full ? bt[n] * d * psi(d * av[e * N + n]) : d * bt[n];
        he[n] = ab[n] * he[n] + bb[n] * xte;
        acc += ct[n] * he[n];
      }
      y[cell * E + e] = acc + sv[e] * xte;
    }
    std::copy(h.begin(), h.end(), states->begin() + t * E * N);
  }
  ensure_finite(y, "scan_along_path");

  auto order = std::make_shared<std::vector<std::int64_t>>(path.order);
  return ad::make_op(
      std::move(y), {x, delta, a, b, c, d_skip},
      [L, E, N, full, order, abar, bbar, states](Node& nd) {
        const double* xv = nd.inputs[0]->value.ptr();
        const double* dv = nd.inputs[1]->value.ptr();
        const double* av = nd.inputs[2]->value.ptr();
        const double* bv = nd.inputs[3]->value.ptr();
        const double* cv = nd.inputs[4]->value.ptr();
        const double* sv = nd.inputs[5]->value.ptr();
        double* gx = wants(nd, 0) ? in_grad(nd, 0).ptr() : nullptr;
        double* gdl = wants(nd, 1) ? in_grad(nd, 1).ptr() : nullptr;
        double* ga = wants(nd, 2) ? in_grad(nd, 2).ptr() : nullptr;
        double* gb = wants(nd, 3) ? in_grad(nd, 3).ptr() : nullptr;
        double* gc = wants(nd, 4) ? in_grad(nd, 4).ptr() : nullptr;
        double* gs = wants(nd, 5) ? in_grad(nd, 5).ptr() : nullptr;
        const double* gy = nd.grad.ptr();
        std::vector<double> dh(static_cast<std::size_t>(E * N), 0.0);
        for (std::int64_t t = L - 1; t >= 0; --t) {
          const std::int64_t cell = (*order)[t];
          const double* ct = cv + cell * N;
          const double* bt = bv + cell * N;
          const double* ht = states->data() + t * E * N;
          const double* hprev = t > 0 ? states->data() + (t - 1) * E * N : nullptr;
          for (std::int64_t e = 0; e < E; ++e) {
            const double g = gy[cell * E + e];
            const double xte = xv[cell * E + e];
            const double d = dv[cell * E + e];
            const double* ab = abar->data() + (t * E + e) * N;
            const double* bb = bbar->data() + (t * E + e) * N;
            double* dhe = dh.data() + e * N;
            if (gs) gs[e] += g * xte;
            double gxa = g * sv[e];
            double gd = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
              const double an = av[e * N + n];
              if (gc) gc[cell * N + n] += g * ht[e * N + n];
              const double total = dhe[n] + g * ct[n];
              gxa += total * bb[n];
              // through a_bar = exp(d a)
              if (hprev) {
                const double gab = total * hprev[e * N + n] * ab[n];
                gd += gab * an;
                if (ga) ga[e * N + n] += gab * d;
              }
              // through b_bar
              const double gbb = total * xte;
              if (full) {
                const double z = d * an;
                gd += gbb * bt[n] * std::exp(z);
                if (ga) ga[e * N + n] += gbb * bt[n] * d * d * dpsi(z);
                if (gb) gb[cell * N + n] += gbb * d * psi(z);
              } else {
                gd += gbb * bt[n];
                if (gb) gb[cell * N + n] += gbb * d;
              }
              dhe[n] = total * ab[n];
            }
            if (gx) gx[cell * E + e] += gxa;
            if (gdl) gdl[cell * E + e] += gd;
          }
        }
      });
}

std::array<ScanPath, 4> make_scan_paths(std::int64_t height, std::int64_t width) {
  if (height < 1 || width < 1) throw DimensionError("make_scan_paths needs H, W >= 1");
  const std::int64_t L = height * width;
  std::array<ScanPath, 4> paths;
  auto& rows = paths[0].order;
  for (std::int64_t r = 0; r < height; ++r)
    for (std::int64_t k = 0; k < width; ++k) rows.push_back(r * width + (r % 2 == 0 ? k : width - 1 - k));
  auto& cols = paths[2].order;
  for (std::int64_t c = 0; c < width; ++c)
    for (std::int64_t k = 0; k < height; ++k) cols.push_back((c % 2 == 0 ? k : height - 1 - k) * width + c);
  paths[1].order.assign(rows.rbegin(), rows.rend());
  paths[3].order.assign(cols.rbegin(), cols.rend());
  for (auto& p : paths) {
    p.inverse.assign(static_cast<std::size_t>(L), -1);
    for (std::int64_t s = 0; s < L; ++s) p.inverse[p.order[s]] = s;
  }
  return paths;
}

std::int64_t default_dt_rank(std::int64_t model_dim) { return (model_dim + 15) / 16; }

SsmParams make_ssm_params(ParamBuilder& pb, const std::string& prefix, std::int64_t inner,
                          std::int64_t state, std::int64_t dt_rank) {
  SsmParams p;
  p.inner = inner;
  p.state = state;
  p.dt_rank = dt_rank;
  p.x_proj = pb.make(prefix + ".x_proj.weight", {inner, dt_rank + 2 * state},
                     init::xavier_uniform(inner, dt_rank + 2 * state));
  p.dt_proj = pb.make(prefix + ".dt_proj.weight", {dt_rank, inner},
                      init::uniform(1.0 / std::sqrt(static_cast<double>(dt_rank))));
  // Δ bias: softplus(bias) log-uniform in [1e-3, 1e-1].
  p.dt_bias = pb.make(prefix + ".dt_proj.bias", {inner}, [](Tensor& t, Rng& rng) {
    const double lo = std::log(1e-3), hi = std::log(1e-1);
    for (auto& v : t.data()) {
      const double dt = std::max(std::exp(lo + rng.uniform() * (hi - lo)), 1e-4);
      v = dt + std::log(-std::expm1(-dt));
    }
  });
  p.a_log = pb.make(prefix + ".A_log", {inner, state}, [](Tensor& t, Rng&) {
    const std::int64_t n = t.dim(1);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = std::log(static_cast<double>(i % n + 1));
  });
  p.d_skip = pb.make(prefix + ".D", {inner}, init::constant(1.0));
  return p;
}

Projections project(const Var& x_seq, const SsmParams& p) {
  Var xdbl = ad::linear(x_seq, p.x_proj);
  Var dt_low = ad::slice_last(xdbl, 0, p.dt_rank);
  Var b = ad::slice_last(xdbl, p.dt_rank, p.state);
  Var c = ad::slice_last(xdbl, p.dt_rank + p.state, p.state);
  Var delta = ad::softplus(ad::add_bcast(ad::linear(dt_low, p.dt_proj), p.dt_bias));
  return {delta, b, c};
}

Var ss2d(const Var& x, const SsmParams& p, ZohMode mode) {
  const auto& xs = x.shape();
  if (xs.size() != 3 || xs[2] != p.inner) {
    throw DimensionError("ss2d: expected [H,W," + std::to_string(p.inner) + "], got " + shape_str(xs));
  }
  const std::int64_t H = xs[0], W = xs[1], E = xs[2];
  const std::int64_t L = H * W;
  Var seq = ad::reshape(x, {L, E});
  // Projections are position-wise, so computing them once and permuting per
  // path is identical to projecting each reordered sequence.
  const Projections pr = project(seq, p);
  Var a = ad::scale(ad::exp(p.a_log), -1.0);
  Var total;
  for (const auto& path : make_scan_paths(H, W)) {
    Var yk = scan_along_path(seq, pr.delta, a, pr.b, pr.c, p.d_skip, path, mode);
    total = total.defined() ? ad::add(total, yk) : yk;
  }
  return ad::reshape(ad::layer_norm(total), {H, W, E});
}

VssmParams make_vssm_params(ParamBuilder& pb, const std::string& prefix, std::int64_t dim,
                            std::int64_t state) {
  const std::int64_t inner = kExpand * dim;
  VssmParams v;
  v.in_proj = make_linear(pb, prefix + ".in_proj", dim, inner, false);
  v.conv_w = pb.make(prefix + ".conv.weight", {3, 3, inner}, init::uniform(1.0 / 3.0));
  v.conv_b = pb.make(prefix + ".conv.bias", {inner}, init::zeros());
  v.ssm = make_ssm_params(pb, prefix, inner, state, default_dt_rank(dim));
  v.out_norm = make_layer_norm(pb, prefix + ".out_norm", inner);
  v.out_proj = make_linear(pb, prefix + ".out_proj", inner, dim, false);
  return v;
}

Var vssm_forward(const Var& x, const VssmParams& p, ZohMode mode) {
  Var u = p.in_proj(x);
  u = ad::silu(ad::depthwise_conv3x3(u, p.conv_w, p.conv_b));
  Var y = ss2d(u, p.ssm, mode);
  y = ad::add_bcast(ad::mul_bcast(y, p.out_norm.weight), p.out_norm.bias);
  return p.out_proj(y);
}

}  // namespace lamamba::ssm
