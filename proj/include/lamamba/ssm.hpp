#pragma once

// Selective state space machinery: ZOH discretization, the S6 recurrence,
// spatially continuous 2D scan paths and the VSSM sub-block.

#include <array>
#include <cstdint>
#include <vector>

#include "lamamba/autodiff.hpp"
#include "lamamba/params.hpp"

namespace lamamba::ssm {

/// How the input matrix is discretized. `simplified` uses Δ·B (Mamba
/// practice); `full` uses (ΔA)^{-1}(exp(ΔA) - 1)·ΔB, with the A→0 limit
/// handled by series expansion.
enum class ZohMode { simplified, full };

struct DiscretizedPair {
  ad::Var a_bar;  // [L, E, N]
  ad::Var b_bar;  // [L, E, N]
};

/// a[E,N] (continuous, negative), delta[L,E] (> 0), b[L,N].
DiscretizedPair zoh_discretize(const ad::Var& a, const ad::Var& delta, const ad::Var& b,
                               ZohMode mode = ZohMode::simplified);

/// h_t = a_bar_t ⊙ h_{t-1} + b_bar_t x_t,  y_t[e] = Σ_n c[t,n] h_t[e,n] + d[e] x_t[e],
/// with h_0 = 0 and an independent state per channel.
/// x[L,E], a_bar/b_bar[L,E,N], c[L,N], d[E] -> y[L,E].
ad::Var selective_scan(const ad::Var& x, const ad::Var& a_bar, const ad::Var& b_bar,
                       const ad::Var& c, const ad::Var& d_skip);

struct ScanPath {
  std::vector<std::int64_t> order;    // sequence position -> grid cell (row-major id)
  std::vector<std::int64_t> inverse;  // grid cell -> sequence position
};

/// Row snake, reversed row snake, column snake, reversed column snake.
std::array<ScanPath, 4> make_scan_paths(std::int64_t height, std::int64_t width);

/// Fused equivalent of: reorder rows of x/delta/b/c by path.order,
/// zoh_discretize, selective_scan, and scatter back to grid order. Performs
/// the same floating-point operations in the same order without
/// materializing the [L,E,N] discretized tensors.
/// x[L,E], delta[L,E], a[E,N], b[L,N], c[L,N], d[E] (all in grid order) -> [L,E].
ad::Var scan_along_path(const ad::Var& x, const ad::Var& delta, const ad::Var& a, const ad::Var& b,
                        const ad::Var& c, const ad::Var& d_skip, const ScanPath& path,
                        ZohMode mode = ZohMode::simplified);

/// Selective-scan parameters for inner width E and state size N.
struct SsmParams {
  ad::Var x_proj;     // [E, R + 2N]: columns [0,R) Δ low rank, [R,R+N) B, [R+N,R+2N) C
  ad::Var dt_proj;    // [R, E]
  ad::Var dt_bias;    // [E]
  ad::Var a_log;      // [E, N];  A = -exp(a_log)
  ad::Var d_skip;     // [E]
  std::int64_t inner = 0;
  std::int64_t state = 0;
  std::int64_t dt_rank = 0;
};

std::int64_t default_dt_rank(std::int64_t model_dim);

SsmParams make_ssm_params(ParamBuilder& pb, const std::string& prefix, std::int64_t inner,
                          std::int64_t state, std::int64_t dt_rank);

/// Position-wise projections of a token sequence x[L,E] to Δ[L,E], B[L,N], C[L,N].
struct Projections {
  ad::Var delta, b, c;
};
Projections project(const ad::Var& x_seq, const SsmParams& p);

/// Four directional scans over x[H,W,E], summed in path order 1..4 and then
/// layer-normalized (no affine).
ad::Var ss2d(const ad::Var& x, const SsmParams& p, ZohMode mode = ZohMode::simplified);

struct VssmParams {
  Linear in_proj;   // D -> E, no bias
  ad::Var conv_w;   // [3,3,E]
  ad::Var conv_b;   // [E]
  SsmParams ssm;
  LayerNormAffine out_norm;  // affine applied after ss2d's normalization
  Linear out_proj;  // E -> D, no bias
};

VssmParams make_vssm_params(ParamBuilder& pb, const std::string& prefix, std::int64_t dim,
                            std::int64_t state);

/// in-proj -> depthwise 3x3 conv -> SiLU -> SS2D -> out-norm affine -> out-proj.
ad::Var vssm_forward(const ad::Var& x, const VssmParams& p, ZohMode mode = ZohMode::simplified);

inline constexpr std::int64_t kExpand = 2;

}  // namespace lamamba::ssm
