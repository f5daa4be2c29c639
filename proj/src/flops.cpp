#include "lamamba/flops.hpp"

#include <cstdio>
#include <sstream>

namespace lamamba::flops {

Mode mode_from_string(const std::string& s) {
  if (s == "full") return Mode::full;
  if (s == "analytic") return Mode::analytic;
  throw ConfigError("unknown FLOPs mode '" + s + "' (expected full or analytic)");
}

std::string to_string(Mode m) { return m == Mode::full ? "full" : "analytic"; }

std::int64_t flops_ss2d(std::int64_t L, std::int64_t D, std::int64_t N) {
  // 4 directions x (3 L (2D) N for discretization and recurrence + L (2D) N readout)
  return 4 * (3 * L * (2 * D) * N + L * (2 * D) * N);
}

std::int64_t flops_wmsa(std::int64_t H, std::int64_t W, std::int64_t D, std::int64_t M) {
  return 4 * H * W * D * D + 2 * M * M * H * W * D;
}

std::int64_t flops_ffn(std::int64_t L, std::int64_t D) { return 4 * L * D * D; }

VssmCount full_vssm(std::int64_t H, std::int64_t W, std::int64_t D, std::int64_t N, std::int64_t R) {
  const std::int64_t L = H * W;
  const std::int64_t E = ssm::kExpand * D;
  VssmCount c;
  c.in_proj = L * D * E;
  c.conv = 9 * L * E;
  c.x_proj = L * E * (R + 2 * N);  // shared by the four directions
  c.dt_proj = L * R * E;
  c.scan = flops_ss2d(L, D, N);
  c.out_proj = L * E * D;
  return c;
}

std::int64_t full_attention(std::int64_t H, std::int64_t W, std::int64_t D, std::int64_t M) {
  const std::int64_t nW = ((H + M - 1) / M) * ((W + M - 1) / M);
  const std::int64_t padded = nW * M * M;
  return 4 * padded * D * D + 2 * nW * M * M * M * M * D;
}

std::int64_t full_ffn(std::int64_t L, std::int64_t D) { return 2 * L * D * (4 * D); }

Components& Components::operator+=(const Components& o) {
  vssm += o.vssm;
  attention += o.attention;
  ffn += o.ffn;
  merge_expand += o.merge_expand;
  embed += o.embed;
  head += o.head;
  return *this;
}

Components block_flops(const ModelConfig& cfg, std::int64_t H, std::int64_t W, std::int64_t D, Mode mode) {
  Components c;
  const std::int64_t L = H * W;
  if (mode == Mode::analytic) {
    c.vssm = flops_ss2d(L, D, cfg.state_dim);
    if (!cfg.flags.disable_attention) c.attention = flops_wmsa(H, W, D, cfg.window);
    c.ffn = flops_ffn(L, D);
  } else {
    c.vssm = full_vssm(H, W, D, cfg.state_dim, ssm::default_dt_rank(D)).total();
    if (!cfg.flags.disable_attention) c.attention = full_attention(H, W, D, cfg.window);
    c.ffn = full_ffn(L, D);
  }
  return c;
}

FlopsReport flops_model(const ModelConfig& cfg, std::int64_t resolution, Mode mode) {
  cfg.validate();
  const std::int64_t p = cfg.flags.patch_size;
  const std::int64_t mult = kVaeFactor * p * (cfg.flags.isotropic_mode ? 1 : 4);
  if (resolution < 1 || resolution % mult != 0) {
    throw ConfigError("resolution " + std::to_string(resolution) + " must be a positive multiple of " +
                      std::to_string(mult));
  }
  FlopsReport r;
  r.mode = mode;
  r.variant = cfg.variant;
  r.resolution = resolution;
  r.latent = resolution / kVaeFactor;
  r.params = count_params(cfg);
  const std::int64_t g = r.latent / p;  // embedded grid side

  const bool full = mode == Mode::full;
  const std::int64_t d1 = cfg.dim_of_stage(1);
  StageEntry embed{"embed", g, g, d1, 0, {}};
  if (full) embed.flops.embed = g * g * cfg.in_channels * p * p * d1;
  r.stages.push_back(embed);

  auto stage_entry = [&](int canonical, int s, std::int64_t depth) {
    const std::int64_t side = g / cfg.down_of_stage(s);
    const std::int64_t D = cfg.dim_of_stage(s);
    StageEntry e{kStageNames[static_cast<std::size_t>(canonical)], side, side, D, depth, {}};
    const Components per = block_flops(cfg, side, side, D, mode);
    for (std::int64_t j = 0; j < depth; ++j) e.flops += per;
    return e;
  };
  const bool iso = cfg.flags.isotropic_mode;
  for (int s = 1; s <= 4; ++s) {
    StageEntry e = stage_entry(s - 1, s, cfg.encoder_depths[s - 1]);
    if (full && !iso && s <= 2) e.flops.merge_expand = 2 * e.height * e.width * e.dim * e.dim;
    r.stages.push_back(e);
  }
  r.stages.push_back(stage_entry(4, 4, cfg.bottleneck_depth));
  for (int s = 4; s >= 1; --s) {
    StageEntry e = stage_entry(9 - s, s, cfg.decoder_depths[s - 1]);
    // Expansion into this stage from the coarser grid at twice the width.
    if (full && !iso && s <= 2) {
      const std::int64_t tokens_in = (e.height / 2) * (e.width / 2);
      e.flops.merge_expand = tokens_in * (2 * e.dim) * (4 * e.dim);
    }
    r.stages.push_back(e);
  }
  StageEntry head{"head", g, g, d1, 0, {}};
  if (full) head.flops.head = g * g * d1 * cfg.out_channels() * p * p;
  r.stages.push_back(head);

  for (const auto& e : r.stages) r.totals += e.flops;
  return r;
}

nlohmann::json FlopsReport::to_json() const {
  auto comp = [](const Components& c) {
    return nlohmann::json{{"vssm", c.vssm},         {"attention", c.attention}, {"ffn", c.ffn},
                          {"merge_expand", c.merge_expand}, {"embed", c.embed}, {"head", c.head},
                          {"total", c.total()}};
  };
  nlohmann::json j;
  j["mode"] = flops::to_string(mode);
  j["variant"] = variant;
  j["resolution"] = resolution;
  j["latent"] = latent;
  j["params"] = params;
  j["unit"] = "MAC";
  j["total"] = total();
  j["gflops"] = gflops();
  j["totals"] = comp(totals);
  auto& arr = j["stages"] = nlohmann::json::array();
  for (const auto& e : stages) {
    arr.push_back({{"stage", e.stage},
                   {"height", e.height},
                   {"width", e.width},
                   {"tokens", e.height * e.width},
                   {"dim", e.dim},
                   {"blocks", e.blocks},
                   {"flops", comp(e.flops)}});
  }
  return j;
}

std::string FlopsReport::table() const {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%s @ %lldpx (latent %lld), %s mode, GFLOPs\n", variant.c_str(),
                static_cast<long long>(resolution), static_cast<long long>(latent), flops::to_string(mode).c_str());
  os << line;
  std::snprintf(line, sizeof line, "%-11s %7s %5s %6s %9s %9s %9s %9s %9s %9s\n", "stage", "grid", "dim", "blocks",
                "vssm", "attn", "ffn", "merge/exp", "embed/hd", "total");
  os << line;
  auto g = [](std::int64_t v) { return static_cast<double>(v) * 1e-9; };
  for (const auto& e : stages) {
    const std::string grid = std::to_string(e.height) + "x" + std::to_string(e.width);
    std::snprintf(line, sizeof line, "%-11s %7s %5lld %6lld %9.4f %9.4f %9.4f %9.4f %9.4f %9.4f\n", e.stage.c_str(),
                  grid.c_str(), static_cast<long long>(e.dim), static_cast<long long>(e.blocks), g(e.flops.vssm),
                  g(e.flops.attention), g(e.flops.ffn), g(e.flops.merge_expand), g(e.flops.embed + e.flops.head),
                  g(e.flops.total()));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-11s %7s %5s %6s %9.4f %9.4f %9.4f %9.4f %9.4f %9.4f\n", "total", "", "", "",
                g(totals.vssm), g(totals.attention), g(totals.ffn), g(totals.merge_expand),
                g(totals.embed + totals.head), g(total()));
  os << line;
  std::snprintf(line, sizeof line, "params: %lld (%.2fM)\n", static_cast<long long>(params),
                static_cast<double>(params) * 1e-6);
  os << line;
  return os.str();
}

}  // namespace lamamba::flops
