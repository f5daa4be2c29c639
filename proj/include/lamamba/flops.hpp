#pragma once

// FLOPs accounting. One multiply-accumulate counts as one FLOP.
//
// analytic: only the three closed forms (SS2D, W-MSA, FFN) per block.
// full:     every multiply-accumulate the built architecture performs, except
//           the AdaLN modulation maps, the timestep MLP, normalizations,
//           gating and other elementwise work.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lamamba/model.hpp"

namespace lamamba::flops {

enum class Mode { full, analytic };

Mode mode_from_string(const std::string& s);
std::string to_string(Mode m);

// Closed forms.
std::int64_t flops_ss2d(std::int64_t L, std::int64_t D, std::int64_t N);   // 32 L D N
std::int64_t flops_wmsa(std::int64_t H, std::int64_t W, std::int64_t D, std::int64_t M);
std::int64_t flops_ffn(std::int64_t L, std::int64_t D);                    // 4 L D^2

// Full-count pieces.
struct VssmCount {
  std::int64_t in_proj = 0, conv = 0, x_proj = 0, dt_proj = 0, scan = 0, out_proj = 0;
  std::int64_t total() const { return in_proj + conv + x_proj + dt_proj + scan + out_proj; }
};
VssmCount full_vssm(std::int64_t H, std::int64_t W, std::int64_t D, std::int64_t N, std::int64_t dt_rank);
/// Projections over padded windows plus 2 nW M^4 D for scores and values.
std::int64_t full_attention(std::int64_t H, std::int64_t W, std::int64_t D, std::int64_t M);
std::int64_t full_ffn(std::int64_t L, std::int64_t D);  // 8 L D^2

struct Components {
  std::int64_t vssm = 0, attention = 0, ffn = 0, merge_expand = 0, embed = 0, head = 0;
  std::int64_t total() const { return vssm + attention + ffn + merge_expand + embed + head; }
  Components& operator+=(const Components& o);
};

struct StageEntry {
  std::string stage;  // enc1..enc4, bottleneck, dec4..dec1, embed, head
  std::int64_t height = 0, width = 0, dim = 0, blocks = 0;
  Components flops;
};

struct FlopsReport {
  Mode mode = Mode::full;
  std::string variant;
  std::int64_t resolution = 0;  // image side in pixels
  std::int64_t latent = 0;      // latent side (resolution / 8)
  std::vector<StageEntry> stages;
  Components totals;
  std::int64_t params = 0;

  std::int64_t total() const { return totals.total(); }
  double gflops() const { return static_cast<double>(total()) * 1e-9; }
  nlohmann::json to_json() const;
  std::string table() const;
};

inline constexpr std::int64_t kVaeFactor = 8;

FlopsReport flops_model(const ModelConfig& cfg, std::int64_t resolution, Mode mode = Mode::full);

/// Per-block cost at an (H, W) grid, as counted in the given mode.
Components block_flops(const ModelConfig& cfg, std::int64_t H, std::int64_t W, std::int64_t D, Mode mode);

}  // namespace lamamba::flops
