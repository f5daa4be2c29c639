#include "lamamba/model.hpp"

#include <cmath>

namespace lamamba {

using ad::Var;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

std::int64_t ModelConfig::dim_of_stage(int s) const {
  if (s < 1 || s > 4) throw ConfigError("stage index out of range: " + std::to_string(s));
  if (flags.isotropic_mode) return stage_dims[0];
  return stage_dims[static_cast<std::size_t>(std::min(s, 3) - 1)];
}

std::int64_t ModelConfig::down_of_stage(int s) const {
  if (flags.isotropic_mode) return 1;
  return s == 1 ? 1 : s == 2 ? 2 : 4;
}

void ModelConfig::validate() const {
  auto fail = [this](const std::string& msg) { throw ConfigError("config '" + variant + "': " + msg); };
  for (auto d : stage_dims)
    if (d < 1) fail("stage dims must be positive");
  if (!flags.isotropic_mode) {
    if (stage_dims[1] != 2 * stage_dims[0] || stage_dims[2] != 2 * stage_dims[1]) {
      fail("stage dims must double at each patch merge");
    }
  }
  for (auto d : encoder_depths)
    if (d < 0) fail("negative encoder depth");
  for (auto d : decoder_depths)
    if (d < 0) fail("negative decoder depth");
  if (bottleneck_depth < 0) fail("negative bottleneck depth");
  if (cond_dim < 1) fail("cond_dim must be positive");
  if (window < 1) fail("window must be >= 1");
  if (state_dim < 1) fail("state_dim must be >= 1");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (in_channels < 1) fail("in_channels must be >= 1");
  if (flags.patch_size < 1) fail("patch_size must be >= 1");
  for (int s = 1; s <= 4; ++s) {
    const std::int64_t d = dim_of_stage(s);
    if (d % attn::default_heads(d) != 0) fail("stage width not divisible by its head count");
  }
}

namespace {

ModelConfig make_preset(std::string name, std::int64_t d1, std::int64_t cond, bool large) {
  ModelConfig c;
  c.variant = std::move(name);
  c.stage_dims = {d1, 2 * d1, 4 * d1};
  c.encoder_depths = {2, 2, 2, large ? 2 : 0};
  c.bottleneck_depth = large ? 2 : 1;
  c.decoder_depths = {3, 3, 3, large ? 3 : 0};
  c.cond_dim = cond;
  return c;
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"S", "B", "L", "XL", "T"};
  return names;
}

ModelConfig preset(const std::string& name) {
  if (name == "S") return make_preset("S", 96, 192, false);
  if (name == "B") return make_preset("B", 192, 384, false);
  if (name == "L") return make_preset("L", 256, 1024, true);
  if (name == "XL") return make_preset("XL", 320, 1280, true);
  if (name == "T") {
    ModelConfig c = make_preset("T", 32, 64, false);
    c.window = 4;
    c.state_dim = 8;
    c.num_classes = 10;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected S, B, L, XL or T)");
}

json to_json(const ModelConfig& c) {
  return json{{"variant", c.variant},
              {"stage_dims", c.stage_dims},
              {"encoder_depths", c.encoder_depths},
              {"bottleneck_depth", c.bottleneck_depth},
              {"decoder_depths", c.decoder_depths},
              {"cond_dim", c.cond_dim},
              {"window", c.window},
              {"state_dim", c.state_dim},
              {"num_classes", c.num_classes},
              {"zoh", c.zoh == ssm::ZohMode::full ? "full" : "simplified"},
              {"flags",
               {{"disable_attention", c.flags.disable_attention},
                {"disable_shift", c.flags.disable_shift},
                {"isotropic_mode", c.flags.isotropic_mode},
                {"patch_size", c.flags.patch_size}}}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    // A config may start from a preset and override individual keys.
    if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
    if (j.contains("variant")) c.variant = j.at("variant").get<std::string>();
    if (j.contains("stage_dims")) {
      auto dims = j.at("stage_dims").get<std::vector<std::int64_t>>();
      // A fourth entry (stage 4) is accepted if it repeats stage 3's width.
      if (dims.size() == 4 && dims[3] == dims[2]) dims.pop_back();
      if (dims.size() != 3) throw ConfigError("stage_dims needs 3 entries");
      std::copy(dims.begin(), dims.end(), c.stage_dims.begin());
    }
    auto depths = [&j](const char* key, std::array<std::int64_t, 4>& out) {
      if (!j.contains(key)) return;
      auto v = j.at(key).get<std::vector<std::int64_t>>();
      if (v.size() != 4) throw ConfigError(std::string(key) + " needs 4 entries (stages 1..4)");
      std::copy(v.begin(), v.end(), out.begin());
    };
    depths("encoder_depths", c.encoder_depths);
    depths("decoder_depths", c.decoder_depths);
    if (j.contains("bottleneck_depth")) c.bottleneck_depth = j.at("bottleneck_depth").get<std::int64_t>();
    if (j.contains("cond_dim")) c.cond_dim = j.at("cond_dim").get<std::int64_t>();
    if (j.contains("window")) c.window = j.at("window").get<std::int64_t>();
    if (j.contains("state_dim")) c.state_dim = j.at("state_dim").get<std::int64_t>();
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<std::int64_t>();
    if (j.contains("zoh")) {
      const auto z = j.at("zoh").get<std::string>();
      if (z == "full") c.zoh = ssm::ZohMode::full;
      else if (z == "simplified") c.zoh = ssm::ZohMode::simplified;
      else throw ConfigError("zoh must be 'simplified' or 'full'");
    }
    if (j.contains("flags")) {
      const auto& f = j.at("flags");
      c.flags.disable_attention = f.value("disable_attention", c.flags.disable_attention);
      c.flags.disable_shift = f.value("disable_shift", c.flags.disable_shift);
      c.flags.isotropic_mode = f.value("isotropic_mode", c.flags.isotropic_mode);
      c.flags.patch_size = f.value("patch_size", c.flags.patch_size);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Layout

std::string BlockSlot::prefix() const {
  return "stage" + std::to_string(stage) + ".block" + std::to_string(block);
}

std::vector<BlockSlot> block_layout(const ModelConfig& cfg) {
  std::vector<BlockSlot> out;
  auto add_stage = [&](int canonical, int s, std::int64_t depth) {
    for (std::int64_t j = 0; j < depth; ++j) {
      BlockSlot b;
      b.stage = canonical;
      b.block = static_cast<int>(j);
      b.dim = cfg.dim_of_stage(s);
      b.down = cfg.down_of_stage(s);
      b.shifted = (j % 2 == 1) && !cfg.flags.disable_shift;
      out.push_back(b);
    }
  };
  for (int s = 1; s <= 4; ++s) add_stage(s - 1, s, cfg.encoder_depths[s - 1]);
  add_stage(4, 4, cfg.bottleneck_depth);
  for (int s = 4; s >= 1; --s) add_stage(9 - s, s, cfg.decoder_depths[s - 1]);
  return out;
}

BlockOptions block_options(const ModelConfig& cfg, const BlockSlot& slot) {
  BlockOptions o;
  o.shifted = slot.shifted;
  o.disable_attention = cfg.flags.disable_attention;
  o.window = cfg.window;
  o.state = cfg.state_dim;
  o.zoh = cfg.zoh;
  return o;
}

BlockParams build_block(const ModelConfig& cfg, const BlockSlot& slot, std::uint64_t seed) {
  ParamBuilder pb(seed);
  return make_block_params(pb, slot.prefix(), slot.dim, cfg.cond_dim, block_options(cfg, slot));
}

// ---------------------------------------------------------------------------
// Resolution changes

Var space_to_depth(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 3) throw DimensionError("space_to_depth: expected [H,W,D], got " + shape_str(s));
  const std::int64_t H = s[0], W = s[1], D = s[2];
  if (H % 2 != 0 || W % 2 != 0) {
    throw DimensionError("patch merge needs even extents, got " + shape_str(s));
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(H * W * D));
  std::size_t k = 0;
  for (std::int64_t i = 0; i < H / 2; ++i)
    for (std::int64_t j = 0; j < W / 2; ++j)
      for (std::int64_t q = 0; q < 4; ++q)
        for (std::int64_t d = 0; d < D; ++d)
          idx[k++] = ((2 * i + q / 2) * W + (2 * j + q % 2)) * D + d;
  return ad::gather(x, std::move(idx), {H / 2, W / 2, 4 * D});
}

Var depth_to_space(const Var& x) {
  const auto& s = x.shape();
  if (s.size() != 3 || s[2] % 4 != 0) {
    throw DimensionError("depth_to_space: expected [H,W,4k], got " + shape_str(s));
  }
  const std::int64_t H = s[0], W = s[1], C = s[2] / 4;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(H * W * 4 * C));
  for (std::int64_t i = 0; i < H; ++i)
    for (std::int64_t j = 0; j < W; ++j)
      for (std::int64_t q = 0; q < 4; ++q)
        for (std::int64_t d = 0; d < C; ++d) {
          const std::int64_t r = 2 * i + q / 2, c = 2 * j + q % 2;
          idx[(r * 2 * W + c) * C + d] = (i * W + j) * 4 * C + q * C + d;
        }
  return ad::gather(x, std::move(idx), {2 * H, 2 * W, C});
}

Var patch_merge(const Var& x, const PatchMerge& p) { return p.proj(p.norm(space_to_depth(x))); }

Var patch_expand(const Var& x, const PatchExpand& p) {
  if (x.shape().back() % 2 != 0) {
    throw DimensionError("patch expand needs an even width, got " + shape_str(x.shape()));
  }
  return p.norm(depth_to_space(p.proj(x)));
}

namespace {

// [h,w,c] <-> [h/p, w/p, p*p*c] with row-major pixels inside a patch.
Var patchify(const Var& z, std::int64_t p) {
  if (p == 1) return z;
  const auto& s = z.shape();
  const std::int64_t H = s[0], W = s[1], C = s[2];
  std::vector<std::int64_t> idx(static_cast<std::size_t>(H * W * C));
  std::size_t k = 0;
  for (std::int64_t i = 0; i < H / p; ++i)
    for (std::int64_t j = 0; j < W / p; ++j)
      for (std::int64_t a = 0; a < p; ++a)
        for (std::int64_t b = 0; b < p; ++b)
          for (std::int64_t c = 0; c < C; ++c) idx[k++] = ((i * p + a) * W + j * p + b) * C + c;
  return ad::gather(z, std::move(idx), {H / p, W / p, p * p * C});
}

Var unpatchify(const Var& y, std::int64_t p) {
  if (p == 1) return y;
  const auto& s = y.shape();
  const std::int64_t h = s[0], w = s[1], C = s[2] / (p * p);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(h * w * p * p * C));
  for (std::int64_t i = 0; i < h; ++i)
    for (std::int64_t j = 0; j < w; ++j)
      for (std::int64_t a = 0; a < p; ++a)
        for (std::int64_t b = 0; b < p; ++b)
          for (std::int64_t c = 0; c < C; ++c)
            idx[((i * p + a) * w * p + j * p + b) * C + c] = (i * w + j) * p * p * C + (a * p + b) * C + c;
  return ad::gather(y, std::move(idx), {h * p, w * p, C});
}

}  // namespace

Tensor timestep_features(double t, std::int64_t width) {
  const std::int64_t half = width / 2;
  Tensor f(Shape{width});
  for (std::int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    f[i] = std::sin(t * freq);
    f[half + i] = std::cos(t * freq);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Construction

ModelParts declare_model(const ModelConfig& cfg, ParamBuilder& pb) {
  cfg.validate();
  ModelParts m;
  const std::int64_t p2 = cfg.flags.patch_size * cfg.flags.patch_size;
  const std::int64_t d1 = cfg.dim_of_stage(1);
  const std::int64_t C = cfg.cond_dim;

  m.embed = make_linear(pb, "embed", cfg.in_channels * p2, d1);
  m.t_embed.fc1 = make_linear(pb, "t_embed.fc1", kTimestepFeatures, C, true, init::normal(0.02));
  m.t_embed.fc2 = make_linear(pb, "t_embed.fc2", C, C, true, init::normal(0.02));
  m.label_table = pb.make("y_embed.table", {cfg.num_classes + 1, C}, [](Tensor& t, Rng& rng) {
    const std::int64_t rows = t.dim(0), cols = t.dim(1);
    for (std::int64_t i = 0; i < (rows - 1) * cols; ++i) t[i] = 0.02 * rng.normal();
    for (std::int64_t i = (rows - 1) * cols; i < rows * cols; ++i) t[i] = 0.0;
  });

  m.stages.assign(9, {});
  for (const auto& slot : block_layout(cfg)) {
    m.stages[static_cast<std::size_t>(slot.stage)].push_back(
        make_block_params(pb, slot.prefix(), slot.dim, C, block_options(cfg, slot)));
  }

  if (!cfg.flags.isotropic_mode) {
    for (int s = 1; s <= 2; ++s) {
      const std::int64_t d = cfg.dim_of_stage(s);
      const std::string mp = "merge" + std::to_string(s);
      auto& mg = m.merges[static_cast<std::size_t>(s - 1)];
      mg.norm = make_layer_norm(pb, mp + ".norm", 4 * d);
      mg.proj = make_linear(pb, mp + ".proj", 4 * d, 2 * d, false);
      // Expand into decoder stage s from width 2d.
      const std::string ep = "expand" + std::to_string(s);
      auto& ex = m.expands[static_cast<std::size_t>(s - 1)];
      ex.proj = make_linear(pb, ep + ".proj", 2 * d, 4 * d, false);
      ex.norm = make_layer_norm(pb, ep + ".norm", d);
    }
  }

  m.head.adaln = make_adaln_map(pb, "head.adaln", C, d1, 2);
  m.head.proj = make_linear(pb, "head.proj", d1, cfg.out_channels() * p2, true, init::zeros());
  return m;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), builder_(seed), parts_(declare_model(cfg_, builder_)) {}

std::optional<Var> Model::find(const std::string& name) const {
  for (const auto& p : builder_.params())
    if (p.name() == name) return p;
  return std::nullopt;
}

std::int64_t count_params(const ModelConfig& cfg) {
  ParamBuilder pb(0, ParamBuilder::Mode::census);
  declare_model(cfg, pb);
  return pb.count();
}

std::int64_t count_params(const Model& model) { return model.num_params(); }

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  ParamBuilder pb(0, ParamBuilder::Mode::census);
  declare_model(cfg, pb);
  return pb.specs();
}

// ---------------------------------------------------------------------------
// Forward

Var Model::condition(std::int64_t t, std::int64_t label) const {
  if (t < 0) throw ContractError("timestep must be non-negative, got " + std::to_string(t));
  if (label < 0 || label > cfg_.num_classes) {
    throw ContractError("label " + std::to_string(label) + " outside [0, " +
                        std::to_string(cfg_.num_classes) + "]");
  }
  const auto& te = parts_.t_embed;
  Var temb = te.fc2(ad::silu(te.fc1(ad::constant(timestep_features(static_cast<double>(t))))));
  const std::int64_t C = cfg_.cond_dim;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(C));
  for (std::int64_t i = 0; i < C; ++i) idx[i] = label * C + i;
  Var lemb = ad::gather(parts_.label_table, std::move(idx), {C});
  return ad::add(temb, lemb);
}

Var Model::embed(const Var& z) const {
  const auto& s = z.shape();
  if (s.size() != 3 || s[2] != cfg_.in_channels) {
    throw DimensionError("model input must be [h,w," + std::to_string(cfg_.in_channels) + "], got " +
                         shape_str(s));
  }
  const std::int64_t p = cfg_.flags.patch_size;
  const std::int64_t mult = cfg_.flags.isotropic_mode ? p : 4 * p;
  if (s[0] % mult != 0 || s[1] % mult != 0) {
    throw DimensionError("latent extents " + shape_str(s) + " must be divisible by " + std::to_string(mult));
  }
  return parts_.embed(patchify(z, p));
}

ModelOutput Model::forward(const Var& z, std::int64_t t, std::int64_t label) const {
  Var c = condition(t, label);
  Var x = embed(z);
  const bool iso = cfg_.flags.isotropic_mode;
  auto run = [&](int canonical, Var h) {
    for (const auto& b : parts_.stages[static_cast<std::size_t>(canonical)]) h = lamamba_block(h, c, b);
    return h;
  };

  std::array<Var, 4> skips;
  for (int s = 1; s <= 4; ++s) {
    x = run(s - 1, x);
    skips[static_cast<std::size_t>(s - 1)] = x;
    if (!iso && s <= 2) x = patch_merge(x, parts_.merges[static_cast<std::size_t>(s - 1)]);
  }
  x = run(4, x);
  for (int s = 4; s >= 1; --s) {
    if (!iso && s <= 2) x = patch_expand(x, parts_.expands[static_cast<std::size_t>(s - 1)]);
    const bool active = cfg_.encoder_depths[s - 1] + cfg_.decoder_depths[s - 1] > 0;
    if (!iso && active) x = ad::add(x, skips[static_cast<std::size_t>(s - 1)]);
    x = run(9 - s, x);
  }

  Modulated m = adaln_modulate(x, c, parts_.head.adaln);
  Var out = unpatchify(parts_.head.proj(m.y), cfg_.flags.patch_size);
  return {ad::slice_last(out, 0, cfg_.in_channels), ad::slice_last(out, cfg_.in_channels, cfg_.in_channels)};
}

ModelOutput Model::forward(const Tensor& z, std::int64_t t, std::int64_t label) const {
  return forward(ad::constant(z), t, label);
}

}  // namespace lamamba
