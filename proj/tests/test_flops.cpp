#include <gtest/gtest.h>

#include <regex>

#include "lamamba/flops.hpp"

using namespace lamamba;
using namespace lamamba::flops;

TEST(ClosedForms, Examples) {
  EXPECT_EQ(flops_ss2d(64, 8, 16), 262144);
  EXPECT_EQ(flops_ss2d(128, 8, 16), 2 * 262144);
  EXPECT_EQ(flops_ss2d(64, 8, 0), 0);
  EXPECT_EQ(flops_wmsa(8, 8, 16, 8), 196608);
  EXPECT_EQ(flops_wmsa(5, 7, 6, 1), 4 * 35 * 36 + 2 * 35 * 6);
  EXPECT_EQ(flops_wmsa(16, 8, 16, 8), 2 * flops_wmsa(8, 8, 16, 8));
  EXPECT_EQ(flops_ffn(64, 8), 16384);
  EXPECT_EQ(flops_ffn(64, 16), 4 * 16384);
  EXPECT_EQ(flops_ffn(0, 8), 0);
}

TEST(ClosedForms, FullFfnIsTwiceTheAnalyticForm) {
  for (std::int64_t D : {8, 96, 1280}) EXPECT_EQ(full_ffn(64, D), 2 * flops_ffn(64, D));
  ModelConfig cfg = preset("S");
  EXPECT_EQ(block_flops(cfg, 8, 8, 96, Mode::full).ffn, 8 * 64 * 96 * 96);
  EXPECT_EQ(block_flops(cfg, 8, 8, 96, Mode::analytic).ffn, 4 * 64 * 96 * 96);
}

TEST(ClosedForms, FullAttentionPadsPartialWindows) {
  // 9x9 grid with M = 8 runs as four full windows.
  const std::int64_t want = 4 * (4 * 64 * 16 * 16) + 2 * 4 * 64 * 64 * 16;
  EXPECT_EQ(full_attention(9, 9, 16, 8), want);
  EXPECT_EQ(full_attention(8, 8, 16, 8), flops_wmsa(8, 8, 16, 8));
}

namespace {

// Sum of the closed forms over every block, written out from the layout.
std::int64_t analytic_oracle(const ModelConfig& cfg, std::int64_t resolution) {
  const std::int64_t g = resolution / 8 / cfg.flags.patch_size;
  std::int64_t total = 0;
  for (const BlockSlot& b : block_layout(cfg)) {
    const std::int64_t side = g / b.down, L = side * side, D = b.dim;
    total += 32 * L * D * cfg.state_dim + 4 * L * D * D;
    if (!cfg.flags.disable_attention) total += 4 * L * D * D + 2 * cfg.window * cfg.window * L * D;
  }
  return total;
}

// Full count re-derived from the built parameter shapes: every linear weight
// [in, out] costs tokens * in * out, each depthwise tap one MAC per token and
// channel, plus the scan and the attention products. Valid when windows tile
// the grid exactly.
std::int64_t census_oracle(const ModelConfig& cfg, std::int64_t resolution) {
  const std::int64_t g = resolution / 8 / cfg.flags.patch_size;
  const auto layout = block_layout(cfg);
  const std::regex block_re(R"(stage(\d)\.block(\d+)\.(.*))");
  auto tokens_at_dim = [&](std::int64_t d) {
    for (int s = 1; s <= 4; ++s)
      if (cfg.dim_of_stage(s) == d) return (g / cfg.down_of_stage(s)) * (g / cfg.down_of_stage(s));
    ADD_FAILURE() << "no stage of width " << d;
    return std::int64_t{0};
  };
  std::int64_t total = 0;
  for (const ParamSpec& p : param_specs(cfg)) {
    const std::string& name = p.name;
    const Shape& sh = p.shape;
    std::smatch mt;
    if (std::regex_match(name, mt, block_re)) {
      const int stage = std::stoi(mt[1]);
      const std::string rest = mt[3];
      std::int64_t side = 0, D = 0;
      for (const BlockSlot& b : layout)
        if (b.stage == stage) side = g / b.down, D = b.dim;
      const std::int64_t L = side * side;
      if (rest.find("adaln") != std::string::npos) continue;
      if (rest.ends_with(".weight") && sh.size() == 2) total += L * sh[0] * sh[1];
      if (rest == "vssm.conv.weight") total += L * sh[0] * sh[1] * sh[2];
      if (rest == "vssm.A_log") total += 32 * L * D * cfg.state_dim;
      if (rest == "attn.q.weight") total += 2 * cfg.window * cfg.window * L * D;
      continue;
    }
    if (name == "embed.weight" || name == "head.proj.weight") total += g * g * sh[0] * sh[1];
    if (name.starts_with("merge") && name.ends_with(".proj.weight")) total += tokens_at_dim(sh[1]) * sh[0] * sh[1];
    if (name.starts_with("expand") && name.ends_with(".proj.weight")) total += tokens_at_dim(sh[0]) * sh[0] * sh[1];
  }
  return total;
}

}  // namespace

TEST(Model, AnalyticTotalsMatchClosedFormSums) {
  for (const auto& name : preset_names())
    for (std::int64_t r : {256, 512}) {
      ModelConfig cfg = preset(name);
      EXPECT_EQ(flops_model(cfg, r, Mode::analytic).total(), analytic_oracle(cfg, r)) << name << " @" << r;
    }
}

TEST(Model, FullCountMatchesParameterCensus) {
  for (const auto& name : preset_names()) {
    ModelConfig cfg = preset(name);
    const std::int64_t r = name == "T" ? 128 : 256;
    EXPECT_EQ(flops_model(cfg, r, Mode::full).total(), census_oracle(cfg, r)) << name;
  }
}

TEST(Model, StageBreakdownSumsToTotal) {
  FlopsReport r = flops_model(preset("B"), 256);
  ASSERT_EQ(r.stages.size(), 11u);
  EXPECT_EQ(r.stages.front().stage, "embed");
  EXPECT_EQ(r.stages[5].stage, "bottleneck");
  EXPECT_EQ(r.stages.back().stage, "head");
  std::int64_t sum = 0;
  for (const auto& e : r.stages) sum += e.flops.total();
  EXPECT_EQ(sum, r.total());
  EXPECT_EQ(r.params, count_params(preset("B")));
}

TEST(Model, QuadruplesPerResolutionDoubling) {
  for (const auto& name : preset_names())
    for (Mode mode : {Mode::full, Mode::analytic})
      for (std::int64_t r : {512, 1024}) {
        const double ratio = static_cast<double>(flops_model(preset(name), r, mode).total()) /
                             static_cast<double>(flops_model(preset(name), r / 2, mode).total());
        EXPECT_GE(ratio, 3.9) << name;
        EXPECT_LE(ratio, 4.1) << name;
      }
  // Every piece is linear in tokens when windows tile exactly: exactly 4x.
  EXPECT_EQ(flops_model(preset("XL"), 1024).total(), 4 * flops_model(preset("XL"), 512).total());
}

TEST(Model, SsmCostDoublesWithTokens) {
  ModelConfig cfg = preset("S");
  EXPECT_EQ(block_flops(cfg, 16, 8, 96, Mode::analytic).vssm, 2 * block_flops(cfg, 8, 8, 96, Mode::analytic).vssm);
  EXPECT_EQ(block_flops(cfg, 16, 8, 96, Mode::full).vssm, 2 * block_flops(cfg, 8, 8, 96, Mode::full).vssm);
}

TEST(Ablation, DisableAttentionRemovesExactlyTheAttentionTerms) {
  for (const auto& name : preset_names()) {
    ModelConfig cfg = preset(name), off = preset(name);
    off.flags.disable_attention = true;
    const std::int64_t g = 256 / 8;
    std::int64_t wmsa = 0;
    for (const BlockSlot& b : block_layout(cfg)) wmsa += flops_wmsa(g / b.down, g / b.down, b.dim, cfg.window);
    EXPECT_EQ(flops_model(cfg, 256, Mode::analytic).total() - flops_model(off, 256, Mode::analytic).total(), wmsa)
        << name;
    EXPECT_EQ(flops_model(off, 256, Mode::analytic).totals.attention, 0);
  }
}

TEST(Ablation, DisableShiftIsFlopsNeutral) {
  for (const auto& name : preset_names()) {
    ModelConfig cfg = preset(name), off = preset(name);
    off.flags.disable_shift = true;
    for (Mode mode : {Mode::full, Mode::analytic})
      EXPECT_EQ(flops_model(cfg, 256, mode).total(), flops_model(off, 256, mode).total());
  }
}

TEST(Model, InvalidResolution) {
  EXPECT_THROW(flops_model(preset("S"), 100), ConfigError);
  EXPECT_THROW(flops_model(preset("S"), 0), ConfigError);
  EXPECT_THROW(flops_model(preset("S"), 16), ConfigError);  // latent 2 cannot be merged twice
  EXPECT_NO_THROW(flops_model(preset("S"), 32));
  EXPECT_THROW(mode_from_string("approx"), ConfigError);
}

TEST(Report, JsonCarriesBreakdown) {
  FlopsReport r = flops_model(preset("S"), 256);
  nlohmann::json j = r.to_json();
  EXPECT_EQ(j["mode"], "full");
  EXPECT_EQ(j["total"].get<std::int64_t>(), r.total());
  EXPECT_EQ(j["stages"].size(), r.stages.size());
  std::int64_t attn = 0;
  for (const auto& s : j["stages"]) attn += s["flops"]["attention"].get<std::int64_t>();
  EXPECT_EQ(attn, r.totals.attention);
  EXPECT_NE(r.table().find("bottleneck"), std::string::npos);
}
