#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "lamamba/ssm.hpp"

using namespace lamamba;
using namespace lamamba::ssm;
using ad::constant;
using ad::parameter;

namespace {

// Step-by-step recurrence written out with plain loops.
Tensor unrolled_scan(const Tensor& x, const Tensor& abar, const Tensor& bbar, const Tensor& c, const Tensor& d) {
  const std::int64_t L = x.dim(0), E = x.dim(1), N = c.dim(1);
  Tensor y({L, E});
  for (std::int64_t e = 0; e < E; ++e) {
    std::vector<double> h(static_cast<std::size_t>(N), 0.0);
    for (std::int64_t t = 0; t < L; ++t) {
      double acc = 0.0;
      for (std::int64_t n = 0; n < N; ++n) {
        const std::int64_t k = (t * E + e) * N + n;
        h[n] = abar[k] * h[n] + bbar[k] * x[t * E + e];
        acc += c[t * N + n] * h[n];
      }
      y[t * E + e] = acc + d[e] * x[t * E + e];
    }
  }
  return y;
}

Tensor uniform_in(Rng& rng, const Shape& s, double lo, double hi) {
  Tensor t = rand_uniform(rng, s);
  for (double& v : t.data()) v = lo + (hi - lo) * v;
  return t;
}

std::pair<std::int64_t, std::int64_t> cell(std::int64_t id, std::int64_t W) { return {id / W, id % W}; }

}  // namespace

TEST(Zoh, Examples) {
  auto r = zoh_discretize(constant(Tensor({1, 1}, {-1.0})), constant(Tensor({1, 1}, {std::log(2.0)})),
                          constant(Tensor({1, 1}, {1.0})));
  EXPECT_NEAR(r.a_bar.value()[0], 0.5, 1e-15);
  EXPECT_NEAR(r.b_bar.value()[0], 0.693147, 1e-6);

  auto tiny = zoh_discretize(constant(Tensor({1, 1}, {-3.0})), constant(Tensor({1, 1}, {1e-12})),
                             constant(Tensor({1, 1}, {2.0})));
  EXPECT_NEAR(tiny.a_bar.value()[0], 1.0, 1e-11);
  EXPECT_NEAR(tiny.b_bar.value()[0], 0.0, 1e-11);

  // A -> 0 through A = -exp(a_log) with a_log very negative.
  const double a0 = -std::exp(-800.0);
  auto flat = zoh_discretize(constant(Tensor({1, 1}, {a0})), constant(Tensor({1, 1}, {5.0})),
                             constant(Tensor({1, 1}, {1.0})));
  EXPECT_EQ(flat.a_bar.value()[0], 1.0);
  auto flat_full = zoh_discretize(constant(Tensor({1, 1}, {a0})), constant(Tensor({1, 1}, {5.0})),
                                  constant(Tensor({1, 1}, {1.0})), ZohMode::full);
  EXPECT_NEAR(flat_full.b_bar.value()[0], 5.0, 1e-12);  // limit of (e^{ΔA}-1)/A
}

TEST(Zoh, NonPositiveDeltaIsContractError) {
  EXPECT_THROW(zoh_discretize(constant(Tensor({1, 1}, {-1.0})), constant(Tensor({1, 1}, {0.0})),
                              constant(Tensor({1, 1}, {1.0}))),
               ContractError);
  Tensor a({1, 1}, {-1.0}), d({2, 1}, {0.1, -0.1});
  Rng rng(1);
  EXPECT_THROW(scan_along_path(constant(rand_normal(rng, {2, 1})), constant(d), constant(a),
                               constant(rand_normal(rng, {2, 1})), constant(rand_normal(rng, {2, 1})),
                               constant(Tensor({1})), make_scan_paths(1, 2)[0]),
               ContractError);
}

TEST(Zoh, FullModeMatchesClosedForm) {
  Rng rng(8);
  const std::int64_t L = 3, E = 2, N = 4;
  Tensor a = uniform_in(rng, {E, N}, -4.0, -0.1), delta = uniform_in(rng, {L, E}, 0.01, 1.0);
  Tensor b = rand_normal(rng, {L, N});
  auto r = zoh_discretize(constant(a), constant(delta), constant(b), ZohMode::full);
  for (std::int64_t t = 0; t < L; ++t)
    for (std::int64_t e = 0; e < E; ++e)
      for (std::int64_t n = 0; n < N; ++n) {
        const double A = a.at({e, n}), dl = delta.at({t, e});
        EXPECT_NEAR(r.a_bar.value().at({t, e, n}), std::exp(dl * A), 1e-15);
        EXPECT_NEAR(r.b_bar.value().at({t, e, n}), (std::exp(dl * A) - 1.0) / A * b.at({t, n}), 1e-13);
      }
}

TEST(Zoh, Gradients) {
  Rng rng(21);
  Tensor a = uniform_in(rng, {2, 3}, -2.0, -0.2), delta = uniform_in(rng, {4, 2}, 0.05, 0.8);
  Tensor b = rand_normal(rng, {4, 3});
  Tensor wa = rand_normal(rng, {4, 2, 3}), wb = rand_normal(rng, {4, 2, 3});
  for (ZohMode mode : {ZohMode::simplified, ZohMode::full}) {
    auto loss = [&](const Var& av, const Var& dv, const Var& bv) {
      auto r = zoh_discretize(av, dv, bv, mode);
      return ad::add(ad::sum(ad::mul(r.a_bar, constant(wa))), ad::sum(ad::mul(r.b_bar, constant(wb))));
    };
    EXPECT_LT(ad::finite_diff_check([&](const Var& t) { return loss(t, constant(delta), constant(b)); }, a)
                  .max_rel_error,
              1e-6);
    EXPECT_LT(ad::finite_diff_check([&](const Var& t) { return loss(constant(a), t, constant(b)); }, delta)
                  .max_rel_error,
              1e-6);
    EXPECT_LT(ad::finite_diff_check([&](const Var& t) { return loss(constant(a), constant(delta), t); }, b)
                  .max_rel_error,
              1e-6);
  }
}

TEST(SelectiveScan, HandExample) {
  Var y = selective_scan(constant(Tensor({3, 1}, 1.0)), constant(Tensor({3, 1, 1}, 0.5)),
                         constant(Tensor({3, 1, 1}, 1.0)), constant(Tensor({3, 1}, 1.0)), constant(Tensor({1})));
  EXPECT_EQ(y.value(), Tensor({3, 1}, {1.0, 1.5, 1.75}));
}

TEST(SelectiveScan, MemorylessWhenAbarZero) {
  Rng rng(2);
  const std::int64_t L = 5, E = 2, N = 3;
  Tensor x = rand_normal(rng, {L, E}), bbar = rand_normal(rng, {L, E, N}), c = rand_normal(rng, {L, N});
  Tensor d = rand_normal(rng, {E});
  Tensor y = selective_scan(constant(x), constant(Tensor({L, E, N})), constant(bbar), constant(c), constant(d)).value();
  for (std::int64_t t = 0; t < L; ++t)
    for (std::int64_t e = 0; e < E; ++e) {
      double want = d[e] * x.at({t, e});
      for (std::int64_t n = 0; n < N; ++n) want += c.at({t, n}) * bbar.at({t, e, n}) * x.at({t, e});
      EXPECT_NEAR(y.at({t, e}), want, 1e-14);
    }
}

TEST(SelectiveScan, MatchesUnrolledOracle) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::int64_t L = rng.uniform_int(1, 32), E = rng.uniform_int(1, 4), N = rng.uniform_int(1, 8);
    Tensor x = rand_normal(rng, {L, E}), abar = rand_uniform(rng, {L, E, N}), bbar = rand_normal(rng, {L, E, N});
    Tensor c = rand_normal(rng, {L, N}), d = rand_normal(rng, {E});
    Tensor y = selective_scan(constant(x), constant(abar), constant(bbar), constant(c), constant(d)).value();
    ASSERT_LT(max_abs_diff(y, unrolled_scan(x, abar, bbar, c, d)), 1e-12) << "trial " << trial;
  }
}

TEST(SelectiveScan, Gradients) {
  Rng rng(12);
  const std::int64_t L = 6, E = 2, N = 3;
  Tensor x = rand_normal(rng, {L, E}), abar = uniform_in(rng, {L, E, N}, 0.1, 0.95);
  Tensor bbar = rand_normal(rng, {L, E, N}), c = rand_normal(rng, {L, N}), d = rand_normal(rng, {E});
  Tensor w = rand_normal(rng, {L, E});
  std::array<Tensor, 5> in{x, abar, bbar, c, d};
  for (std::size_t k = 0; k < in.size(); ++k) {
    auto f = [&](const Var& t) {
      std::array<Var, 5> v;
      for (std::size_t j = 0; j < 5; ++j) v[j] = j == k ? t : constant(in[j]);
      return ad::sum(ad::mul(selective_scan(v[0], v[1], v[2], v[3], v[4]), constant(w)));
    };
    EXPECT_LT(ad::finite_diff_check(f, in[k]).max_rel_error, 1e-6) << "input " << k;
  }
}

TEST(ScanPaths, TwoByTwoExamples) {
  auto p = make_scan_paths(2, 2);
  EXPECT_EQ(p[0].order, (std::vector<std::int64_t>{0, 1, 3, 2}));  // (0,0),(0,1),(1,1),(1,0)
  EXPECT_EQ(p[2].order, (std::vector<std::int64_t>{0, 2, 3, 1}));  // (0,0),(1,0),(1,1),(0,1)
  EXPECT_EQ(p[1].order, (std::vector<std::int64_t>{2, 3, 1, 0}));
  EXPECT_EQ(p[3].order, (std::vector<std::int64_t>{1, 3, 2, 0}));
}

TEST(ScanPaths, SingleRowIsIdentity) {
  for (std::int64_t W = 1; W <= 9; ++W) {
    auto p = make_scan_paths(1, W);
    for (std::int64_t i = 0; i < W; ++i) EXPECT_EQ(p[0].order[i], i);
  }
}

TEST(ScanPaths, BijectiveAndContinuousSweep) {
  for (std::int64_t H = 1; H <= 16; ++H)
    for (std::int64_t W = 1; W <= 16; ++W) {
      auto paths = make_scan_paths(H, W);
      for (const auto& p : paths) {
        ASSERT_EQ(static_cast<std::int64_t>(p.order.size()), H * W);
        std::set<std::int64_t> seen(p.order.begin(), p.order.end());
        ASSERT_EQ(static_cast<std::int64_t>(seen.size()), H * W);
        ASSERT_EQ(*seen.begin(), 0);
        ASSERT_EQ(*seen.rbegin(), H * W - 1);
        for (std::int64_t i = 0; i < H * W; ++i) ASSERT_EQ(p.inverse[p.order[i]], i);
        for (std::int64_t i = 1; i < H * W; ++i) {
          auto [r0, c0] = cell(p.order[i - 1], W);
          auto [r1, c1] = cell(p.order[i], W);
          ASSERT_EQ(std::abs(r0 - r1) + std::abs(c0 - c1), 1) << H << "x" << W;
        }
      }
      for (std::int64_t i = 0; i < H * W; ++i) {
        ASSERT_EQ(paths[1].order[i], paths[0].order[H * W - 1 - i]);
        ASSERT_EQ(paths[3].order[i], paths[2].order[H * W - 1 - i]);
      }
    }
}

namespace {

struct SsmFixture {
  ParamBuilder pb{77};
  SsmParams p;
  SsmFixture(std::int64_t E, std::int64_t N, std::int64_t R) { p = make_ssm_params(pb, "t", E, N, R); }
};

// ss2d written out from first principles: per path, reorder, project,
// discretize, recur, scatter back; sum; normalize.
Tensor ss2d_oracle(const Tensor& x, const SsmParams& p) {
  const std::int64_t H = x.dim(0), W = x.dim(1), E = x.dim(2), L = H * W;
  const std::int64_t N = p.state, R = p.dt_rank;
  const Tensor& xp = p.x_proj.value();
  const Tensor& dtp = p.dt_proj.value();
  Tensor total({L, E});
  for (const auto& path : make_scan_paths(H, W)) {
    Tensor seq({L, E}), delta({L, E}), b({L, N}), c({L, N});
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t e = 0; e < E; ++e) seq[t * E + e] = x[path.order[t] * E + e];
    for (std::int64_t t = 0; t < L; ++t) {
      std::vector<double> dbl(static_cast<std::size_t>(R + 2 * N), 0.0);
      for (std::int64_t j = 0; j < R + 2 * N; ++j)
        for (std::int64_t e = 0; e < E; ++e) dbl[j] += seq[t * E + e] * xp[e * (R + 2 * N) + j];
      for (std::int64_t n = 0; n < N; ++n) {
        b[t * N + n] = dbl[R + n];
        c[t * N + n] = dbl[R + N + n];
      }
      for (std::int64_t e = 0; e < E; ++e) {
        double z = p.dt_bias.value()[e];
        for (std::int64_t r = 0; r < R; ++r) z += dbl[r] * dtp[r * E + e];
        delta[t * E + e] = std::log1p(std::exp(z));
      }
    }
    Tensor abar({L, E, N}), bbar({L, E, N});
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t e = 0; e < E; ++e)
        for (std::int64_t n = 0; n < N; ++n) {
          const double A = -std::exp(p.a_log.value()[e * N + n]);
          abar[(t * E + e) * N + n] = std::exp(delta[t * E + e] * A);
          bbar[(t * E + e) * N + n] = delta[t * E + e] * b[t * N + n];
        }
    Tensor y = unrolled_scan(seq, abar, bbar, c, p.d_skip.value());
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t e = 0; e < E; ++e) total[path.order[t] * E + e] += y[t * E + e];
  }
  Tensor out({H, W, E});
  for (std::int64_t l = 0; l < L; ++l) {
    double mu = 0, var = 0;
    for (std::int64_t e = 0; e < E; ++e) mu += total[l * E + e];
    mu /= static_cast<double>(E);
    for (std::int64_t e = 0; e < E; ++e) var += (total[l * E + e] - mu) * (total[l * E + e] - mu);
    var /= static_cast<double>(E);
    for (std::int64_t e = 0; e < E; ++e) out[l * E + e] = (total[l * E + e] - mu) / std::sqrt(var + kLayerNormEps);
  }
  return out;
}

}  // namespace

TEST(Ss2d, MatchesCompositionalOracle) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    SsmFixture f(6, 4, 2);
    Rng rng(seed);
    // Non-trivial D and wider Δ range than the init so every term matters.
    f.p.d_skip.mutable_value() = rand_normal(rng, {6});
    f.p.dt_proj.mutable_value() = rand_normal(rng, {2, 6});
    Tensor x = rand_normal(rng, {3, 3, 6});
    EXPECT_LT(max_abs_diff(ss2d(constant(x), f.p).value(), ss2d_oracle(x, f.p)), 1e-12);
  }
  SsmFixture g(4, 3, 1);
  Rng rng(9);
  Tensor x = rand_normal(rng, {2, 5, 4});
  EXPECT_LT(max_abs_diff(ss2d(constant(x), g.p).value(), ss2d_oracle(x, g.p)), 1e-12);
}

TEST(Ss2d, FusedPathEqualsComposition) {
  Rng rng(14);
  const std::int64_t H = 3, W = 4, L = H * W, E = 3, N = 2;
  Tensor x = rand_normal(rng, {L, E}), delta = uniform_in(rng, {L, E}, 0.01, 1.5);
  Tensor a = uniform_in(rng, {E, N}, -3.0, -0.1), b = rand_normal(rng, {L, N}), c = rand_normal(rng, {L, N});
  Tensor d = rand_normal(rng, {E});
  auto gather_rows = [&](const Tensor& t, const ScanPath& path) {
    const std::int64_t w = t.dim(1);
    std::vector<std::int64_t> idx;
    for (std::int64_t s = 0; s < L; ++s)
      for (std::int64_t j = 0; j < w; ++j) idx.push_back(path.order[s] * w + j);
    return ad::gather(constant(t), idx, {L, w});
  };
  for (ZohMode mode : {ZohMode::simplified, ZohMode::full})
    for (const auto& path : make_scan_paths(H, W)) {
      auto zr = zoh_discretize(constant(a), gather_rows(delta, path), gather_rows(b, path), mode);
      Tensor seq_y = selective_scan(gather_rows(x, path), zr.a_bar, zr.b_bar, gather_rows(c, path), constant(d)).value();
      Tensor want({L, E});
      for (std::int64_t s = 0; s < L; ++s)
        for (std::int64_t e = 0; e < E; ++e) want[path.order[s] * E + e] = seq_y[s * E + e];
      Tensor got = scan_along_path(constant(x), constant(delta), constant(a), constant(b), constant(c), constant(d),
                                   path, mode)
                       .value();
      EXPECT_EQ(got, want);
    }
}

TEST(Ss2d, ZeroInputMatrixGivesZeros) {
  SsmFixture f(4, 3, 1);
  Tensor& xp = f.p.x_proj.mutable_value();
  for (std::int64_t e = 0; e < 4; ++e)
    for (std::int64_t n = 0; n < 3; ++n) xp[e * (1 + 6) + 1 + n] = 0.0;  // B columns
  f.p.d_skip.mutable_value() = Tensor({4});
  Tensor y = ss2d(constant(Tensor({3, 3, 4}, 0.7)), f.p).value();
  EXPECT_EQ(y, Tensor({3, 3, 4}));
}

TEST(Ss2d, SingleCellIsFourTimesOneScan) {
  SsmFixture f(4, 3, 1);
  Rng rng(5);
  Tensor x = rand_normal(rng, {1, 1, 4});
  auto pr = project(constant(x.reshaped({1, 4})), f.p);
  auto zr = zoh_discretize(ad::scale(ad::exp(f.p.a_log), -1.0), pr.delta, pr.b);
  Tensor one = selective_scan(constant(x.reshaped({1, 4})), zr.a_bar, zr.b_bar, pr.c, f.p.d_skip).value();
  for (double& v : one.data()) v *= 4.0;
  EXPECT_LT(max_abs_diff(ss2d(constant(x), f.p).value(), layer_norm(one).reshaped({1, 1, 4})), 1e-14);
}

TEST(Ss2d, AbarInUnitInterval) {
  SsmFixture f(8, 16, 1);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = rand_normal(rng, {5, 8});
    for (double& v : x.data()) v *= 3.0;
    auto pr = project(constant(x), f.p);
    auto zr = zoh_discretize(ad::scale(ad::exp(f.p.a_log), -1.0), pr.delta, pr.b);
    for (double v : zr.a_bar.value().data()) {
      ASSERT_GT(v, 0.0);
      ASSERT_LT(v, 1.0);
    }
  }
}

TEST(Ss2d, InitRanges) {
  SsmFixture f(32, 16, 2);
  for (double z : f.p.dt_bias.value().data()) {
    const double dt = std::log1p(std::exp(z));
    EXPECT_GE(dt, 1e-4 * (1 - 1e-12));
    EXPECT_LE(dt, 0.1 * (1 + 1e-12));
  }
  for (std::int64_t e = 0; e < 32; ++e)
    for (std::int64_t n = 0; n < 16; ++n)
      EXPECT_NEAR(f.p.a_log.value().at({e, n}), std::log(static_cast<double>(n + 1)), 1e-15);
  EXPECT_EQ(default_dt_rank(96), 6);
  EXPECT_EQ(default_dt_rank(32), 2);
  EXPECT_EQ(default_dt_rank(33), 3);
}

TEST(Vssm, ZeroProjectionsGiveZeros) {
  ParamBuilder pb(3);
  auto p = make_vssm_params(pb, "v", 4, 4);
  p.in_proj.weight.mutable_value() = Tensor({4, 8});
  p.out_proj.weight.mutable_value() = Tensor({8, 4});
  Rng rng(1);
  EXPECT_EQ(vssm_forward(constant(rand_normal(rng, {3, 3, 4})), p).value(), Tensor({3, 3, 4}));
}

TEST(Vssm, ShapePreserved) {
  ParamBuilder pb(3);
  auto p = make_vssm_params(pb, "v", 6, 4);
  Rng rng(2);
  for (auto [H, W] : {std::pair<std::int64_t, std::int64_t>{1, 1}, {2, 5}, {4, 3}}) {
    Var y = vssm_forward(constant(rand_normal(rng, {H, W, 6})), p);
    EXPECT_EQ(y.shape(), (Shape{H, W, 6}));
  }
}

TEST(Vssm, FiniteDifferenceAllParameters) {
  for (ZohMode mode : {ZohMode::simplified, ZohMode::full}) {
    ParamBuilder pb(4);
    auto p = make_vssm_params(pb, "v", 4, 4);
    Rng rng(3);
    for (const Var& v : pb.params()) {
      Var leaf = v;
      for (double& x : leaf.mutable_value().data()) x += 0.3 * rng.normal();
    }
    // Keep Δ in a range where the simplified and full forms differ visibly.
    for (double& z : p.ssm.dt_bias.mutable_value().data()) z = 0.0;
    Tensor x = rand_normal(rng, {4, 4, 4}), w = rand_normal(rng, {4, 4, 4});
    Var xin = parameter(x);
    auto loss = [&] { return ad::sum(ad::mul(vssm_forward(xin, p, mode), constant(w))); };
    for (const Var& leaf : pb.params()) {
      auto r = ad::finite_diff_check_param(loss, leaf, {.h = 1e-5, .max_coords = 24, .seed = 1});
      EXPECT_LT(r.max_rel_error, 1e-4) << leaf.name();
    }
    EXPECT_LT(ad::finite_diff_check_param(loss, xin, {.h = 1e-5, .max_coords = 24}).max_rel_error, 1e-4);
  }
}
