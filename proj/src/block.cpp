#include "lamamba/block.hpp"

namespace lamamba {

using ad::Var;

AdaLnMap make_adaln_map(ParamBuilder& pb, const std::string& prefix, std::int64_t cond_dim,
                        std::int64_t dim, int chunks) {
  AdaLnMap m;
  m.dim = dim;
  m.proj = make_linear(pb, prefix, cond_dim, chunks * dim, true, init::zeros(),
                       [dim](Tensor& b, Rng&) {
                         for (std::int64_t i = 0; i < b.numel(); ++i) b[i] = i < dim ? 1.0 : 0.0;
                       });
  return m;
}

Modulated adaln_modulate(const Var& h, const Var& c, const AdaLnMap& map) {
  if (h.shape().back() != map.dim) {
    throw DimensionError("adaln_modulate: width " + std::to_string(h.shape().back()) + " vs map " +
                         std::to_string(map.dim));
  }
  Var mod = map.proj(ad::silu(c));
  const std::int64_t D = map.dim;
  Var gamma = ad::slice_last(mod, 0, D);
  Var beta = ad::slice_last(mod, D, D);
  Modulated out;
  out.y = ad::add_bcast(ad::mul_bcast(ad::layer_norm(h), gamma), beta);
  if (mod.shape().back() >= 3 * D) out.alpha = ad::slice_last(mod, 2 * D, D);
  return out;
}

FfnParams make_ffn_params(ParamBuilder& pb, const std::string& prefix, std::int64_t dim) {
  return {make_linear(pb, prefix + ".fc1", dim, kFfnRatio * dim),
          make_linear(pb, prefix + ".fc2", kFfnRatio * dim, dim)};
}

Var ffn_forward(const Var& x, const FfnParams& p) { return p.fc2(ad::gelu(p.fc1(x))); }

BlockParams make_block_params(ParamBuilder& pb, const std::string& prefix, std::int64_t dim,
                              std::int64_t cond_dim, const BlockOptions& opts) {
  BlockParams p;
  p.dim = dim;
  p.opts = opts;
  p.vssm = ssm::make_vssm_params(pb, prefix + ".vssm", dim, opts.state);
  if (!opts.disable_attention) p.attn = attn::make_attn_params(pb, prefix + ".attn", dim, opts.window);
  p.ffn = make_ffn_params(pb, prefix + ".ffn", dim);
  p.adaln[0] = make_adaln_map(pb, prefix + ".adaln1", cond_dim, dim);
  if (!opts.disable_attention) p.adaln[1] = make_adaln_map(pb, prefix + ".adaln2", cond_dim, dim);
  p.adaln[2] = make_adaln_map(pb, prefix + ".adaln3", cond_dim, dim);
  return p;
}

Var lamamba_block(const Var& x, const Var& c, const BlockParams& p) {
  Modulated m1 = adaln_modulate(x, c, p.adaln[0]);
  Var x1 = ad::add(x, ad::mul_bcast(ssm::vssm_forward(m1.y, p.vssm, p.opts.zoh), m1.alpha));
  Var x2 = x1;
  if (!p.opts.disable_attention) {
    Modulated m2 = adaln_modulate(x1, c, p.adaln[1]);
    const attn::Shift shift = p.opts.shifted ? attn::half_window_shift(p.opts.window) : attn::Shift{};
    x2 = ad::add(x1, ad::mul_bcast(attn::windowed_msa(m2.y, p.attn, shift), m2.alpha));
  }
  Modulated m3 = adaln_modulate(x2, c, p.adaln[2]);
  return ad::add(x2, ad::mul_bcast(ffn_forward(m3.y, p.ffn), m3.alpha));
}

}  // namespace lamamba
