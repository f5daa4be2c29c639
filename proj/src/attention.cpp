#include "lamamba/attention.hpp"

#include <cmath>

namespace lamamba::attn {

using ad::Var;

Partition window_partition(const Var& x, std::int64_t window, Shift shift) {
  const auto& xs = x.shape();
  if (xs.size() != 3) throw DimensionError("window_partition: expected [H,W,D], got " + shape_str(xs));
  if (window < 1) throw ConfigError("window size must be >= 1");
  const std::int64_t H = xs[0], W = xs[1], D = xs[2];

  WindowMeta m;
  m.height = H;
  m.width = W;
  m.window = window;
  m.shift = {((shift.y % H) + H) % H, ((shift.x % W) + W) % W};
  m.windows_y = (H + window - 1) / window;
  m.windows_x = (W + window - 1) / window;
  m.padded_h = m.windows_y * window;
  m.padded_w = m.windows_x * window;

  const std::int64_t T = window * window;
  const std::int64_t slots = m.num_windows() * T;
  m.source.assign(static_cast<std::size_t>(slots), -1);
  m.region.assign(static_cast<std::size_t>(slots), -1);
  for (std::int64_t wy = 0; wy < m.windows_y; ++wy)
    for (std::int64_t wx = 0; wx < m.windows_x; ++wx)
      for (std::int64_t ty = 0; ty < window; ++ty)
        for (std::int64_t tx = 0; tx < window; ++tx) {
          const std::int64_t r = wy * window + ty;
          const std::int64_t c = wx * window + tx;
          if (r >= H || c >= W) continue;
          const std::int64_t slot = (wy * m.windows_x + wx) * T + ty * window + tx;
          // Rolled cell (r, c) holds x[(r + sy) mod H, (c + sx) mod W].
          m.source[slot] = ((r + m.shift.y) % H) * W + (c + m.shift.x) % W;
          const int wrapped_r = r >= H - m.shift.y ? 1 : 0;
          const int wrapped_c = c >= W - m.shift.x ? 1 : 0;
          m.region[slot] = static_cast<std::int8_t>(wrapped_r * 2 + wrapped_c);
        }

  std::vector<std::int64_t> idx(static_cast<std::size_t>(slots * D));
  for (std::int64_t s = 0; s < slots; ++s)
    for (std::int64_t d = 0; d < D; ++d) idx[s * D + d] = m.source[s] < 0 ? -1 : m.source[s] * D + d;
  Var windows = ad::gather(x, std::move(idx), {m.num_windows(), T, D});
  return {windows, std::move(m)};
}

Var window_reverse(const Var& windows, const WindowMeta& m) {
  const auto& ws = windows.shape();
  const std::int64_t T = m.tokens_per_window();
  if (ws.size() != 3 || ws[0] != m.num_windows() || ws[1] != T) {
    throw DimensionError("window_reverse: windows shape " + shape_str(ws) + " does not match metadata");
  }
  const std::int64_t D = ws[2];
  std::vector<std::int64_t> slot_of(static_cast<std::size_t>(m.height * m.width), -1);
  for (std::size_t s = 0; s < m.source.size(); ++s)
    if (m.source[s] >= 0) slot_of[m.source[s]] = static_cast<std::int64_t>(s);
  std::vector<std::int64_t> idx(slot_of.size() * static_cast<std::size_t>(D));
  for (std::size_t cell = 0; cell < slot_of.size(); ++cell)
    for (std::int64_t d = 0; d < D; ++d) idx[cell * D + d] = slot_of[cell] * D + d;
  return ad::gather(windows, std::move(idx), {m.height, m.width, D});
}

Tensor attention_mask(const WindowMeta& m) {
  const std::int64_t T = m.tokens_per_window();
  const std::int64_t nW = m.num_windows();
  Tensor mask(Shape{nW, T, T});
  for (std::int64_t w = 0; w < nW; ++w) {
    const std::int8_t* reg = m.region.data() + w * T;
    for (std::int64_t i = 0; i < T; ++i)
      for (std::int64_t j = 0; j < T; ++j) {
        bool ok;
        if (reg[i] < 0) ok = i == j;
        else ok = reg[j] == reg[i];
        mask[(w * T + i) * T + j] = ok ? 0.0 : kMasked;
      }
  }
  return mask;
}

std::int64_t default_heads(std::int64_t dim) { return std::max<std::int64_t>(1, dim / 32); }

AttnParams make_attn_params(ParamBuilder& pb, const std::string& prefix, std::int64_t dim,
                            std::int64_t window) {
  AttnParams p;
  p.heads = default_heads(dim);
  if (dim % p.heads != 0) {
    throw ConfigError("attention width " + std::to_string(dim) + " not divisible by " +
                      std::to_string(p.heads) + " heads");
  }
  p.window = window;
  p.q = make_linear(pb, prefix + ".q", dim, dim);
  // A key bias shifts every score of a query equally, which softmax ignores.
  p.k = make_linear(pb, prefix + ".k", dim, dim, false);
  p.v = make_linear(pb, prefix + ".v", dim, dim);
  p.o = make_linear(pb, prefix + ".o", dim, dim);
  return p;
}

namespace {

// [nW, T, D] <-> [nW*heads, T, D/heads]
std::vector<std::int64_t> head_split_index(std::int64_t nW, std::int64_t T, std::int64_t heads,
                                           std::int64_t dh) {
  const std::int64_t D = heads * dh;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nW * T * D));
  std::size_t k = 0;
  for (std::int64_t w = 0; w < nW; ++w)
    for (std::int64_t h = 0; h < heads; ++h)
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t c = 0; c < dh; ++c) idx[k++] = (w * T + t) * D + h * dh + c;
  return idx;
}

std::vector<std::int64_t> head_merge_index(std::int64_t nW, std::int64_t T, std::int64_t heads,
                                           std::int64_t dh) {
  const std::int64_t D = heads * dh;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(nW * T * D));
  for (std::int64_t w = 0; w < nW; ++w)
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t c = 0; c < dh; ++c) idx[(w * T + t) * D + h * dh + c] = ((w * heads + h) * T + t) * dh + c;
  return idx;
}

}  // namespace

AttnResult windowed_msa_detailed(const Var& x, const AttnParams& p, Shift shift) {
  const std::int64_t D = x.shape().at(2);
  if (D % p.heads != 0) throw DimensionError("windowed_msa: width not divisible by heads");
  Partition part = window_partition(x, p.window, shift);
  const std::int64_t nW = part.meta.num_windows();
  const std::int64_t T = part.meta.tokens_per_window();
  const std::int64_t H = p.heads, dh = D / H;

  const Shape split_shape{nW * H, T, dh};
  const auto split = head_split_index(nW, T, H, dh);
  Var q = ad::gather(p.q(part.windows), split, split_shape);
  Var k = ad::gather(p.k(part.windows), split, split_shape);
  Var v = ad::gather(p.v(part.windows), split, split_shape);

  Tensor mask = attention_mask(part.meta);
  Tensor tiled(Shape{nW * H, T, T});
  for (std::int64_t w = 0; w < nW; ++w)
    for (std::int64_t h = 0; h < H; ++h)
      std::copy(mask.ptr() + w * T * T, mask.ptr() + (w + 1) * T * T, tiled.ptr() + (w * H + h) * T * T);

  Var scores = ad::scale(ad::bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var weights = ad::softmax(ad::add_const(scores, tiled));
  Var ctx = ad::gather(ad::bmm(weights, v), head_merge_index(nW, T, H, dh), {nW, T, D});
  Var out = window_reverse(p.o(ctx), part.meta);
  return {out, weights};
}

Var windowed_msa(const Var& x, const AttnParams& p, Shift shift) {
  return windowed_msa_detailed(x, p, shift).out;
}

}  // namespace lamamba::attn
