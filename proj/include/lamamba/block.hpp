#pragma once

// The LaMamba block: VSSM -> local attention -> FFN, each behind an AdaLN
// modulation and a zero-initialized residual gate.

#include <array>
#include <cstdint>
#include <string>

#include "lamamba/attention.hpp"
#include "lamamba/ssm.hpp"

namespace lamamba {

/// SiLU(c) -> Linear(C, 3D) producing (gamma, beta, alpha), in that order.
struct AdaLnMap {
  Linear proj;
  std::int64_t dim = 0;
};

/// Weights zero; bias gives gamma = 1, beta = 0, alpha = 0.
AdaLnMap make_adaln_map(ParamBuilder& pb, const std::string& prefix, std::int64_t cond_dim,
                        std::int64_t dim, int chunks = 3);

struct Modulated {
  ad::Var y;      // gamma * LN(h) + beta
  ad::Var alpha;  // [D], undefined for two-chunk maps
};

Modulated adaln_modulate(const ad::Var& h, const ad::Var& c, const AdaLnMap& map);

struct FfnParams {
  Linear fc1;  // D -> 4D
  Linear fc2;  // 4D -> D
};

inline constexpr std::int64_t kFfnRatio = 4;

FfnParams make_ffn_params(ParamBuilder& pb, const std::string& prefix, std::int64_t dim);
ad::Var ffn_forward(const ad::Var& x, const FfnParams& p);

struct BlockOptions {
  bool shifted = false;            // odd blocks within a stage
  bool disable_attention = false;  // ablation: drop the attention sub-component
  std::int64_t window = 8;
  std::int64_t state = 16;
  ssm::ZohMode zoh = ssm::ZohMode::simplified;
};

struct BlockParams {
  ssm::VssmParams vssm;
  attn::AttnParams attn;  // unused when attention is disabled
  FfnParams ffn;
  std::array<AdaLnMap, 3> adaln;
  BlockOptions opts;
  std::int64_t dim = 0;
};

BlockParams make_block_params(ParamBuilder& pb, const std::string& prefix, std::int64_t dim,
                              std::int64_t cond_dim, const BlockOptions& opts);

/// x[H,W,D], c[C] -> [H,W,D].
ad::Var lamamba_block(const ad::Var& x, const ad::Var& c, const BlockParams& p);

}  // namespace lamamba
