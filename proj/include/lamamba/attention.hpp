#pragma once

// Windowed multi-head self-attention with cyclic-shift windows.

#include <cstdint>
#include <string>
#include <vector>

#include "lamamba/autodiff.hpp"
#include "lamamba/params.hpp"

namespace lamamba::attn {

struct Shift {
  std::int64_t y = 0;
  std::int64_t x = 0;
};

/// Everything needed to invert a partition and to mask cross-boundary pairs.
struct WindowMeta {
  std::int64_t height = 0, width = 0, window = 0;
  Shift shift;                          // effective shift (already reduced mod H, W)
  std::int64_t padded_h = 0, padded_w = 0;
  std::int64_t windows_y = 0, windows_x = 0;
  std::vector<std::int64_t> source;     // slot -> source cell (row-major), -1 for padding
  std::vector<std::int8_t> region;      // slot -> region id; -1 for padding

  std::int64_t num_windows() const { return windows_y * windows_x; }
  std::int64_t tokens_per_window() const { return window * window; }
};

struct Partition {
  ad::Var windows;  // [nW, M*M, D]
  WindowMeta meta;
};

/// Rolls x[H,W,D] by (-sy, -sx), zero-pads to multiples of M and cuts M×M
/// windows in row-major window order, row-major tokens within a window.
Partition window_partition(const ad::Var& x, std::int64_t window, Shift shift = {});
ad::Var window_reverse(const ad::Var& windows, const WindowMeta& meta);

/// Additive mask [nW, M*M, M*M]: 0 where a pair may attend, kMasked otherwise.
/// Tokens from different pre-shift regions never attend to each other;
/// padding keys are masked for every query, and a padding query attends only
/// to itself (its output is discarded).
Tensor attention_mask(const WindowMeta& meta);

/// exp(kMasked - max) underflows to exactly 0, so this behaves as -inf
/// without putting non-finite values in the graph.
inline constexpr double kMasked = -1e30;

struct AttnParams {
  Linear q, k, v, o;  // each D -> D; all but k carry a bias
  std::int64_t heads = 1;
  std::int64_t window = 8;
};

std::int64_t default_heads(std::int64_t dim);

AttnParams make_attn_params(ParamBuilder& pb, const std::string& prefix, std::int64_t dim,
                            std::int64_t window);

struct AttnResult {
  ad::Var out;      // [H, W, D]
  ad::Var weights;  // [nW*heads, M*M, M*M], rows of softmax weights
};

AttnResult windowed_msa_detailed(const ad::Var& x, const AttnParams& p, Shift shift = {});
ad::Var windowed_msa(const ad::Var& x, const AttnParams& p, Shift shift = {});

/// The alternating scheme's shift for a window of size M.
inline Shift half_window_shift(std::int64_t window) { return {window / 2, window / 2}; }

}  // namespace lamamba::attn
