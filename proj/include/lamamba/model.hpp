#pragma once

// Diffusion U-Net: configuration, presets, construction and forward pass.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lamamba/block.hpp"

namespace lamamba {

struct ModelFlags {
  bool disable_attention = false;
  bool disable_shift = false;
  bool isotropic_mode = false;  // every stage at stage_dims[0], full resolution, no skips
  std::int64_t patch_size = 1;
};

/// Stage numbering: encoder stages 1..4 (merges after 1 and 2), a bottleneck,
/// decoder stages 4..1 (expands before 2 and 1). Stages 3, 4 and the
/// bottleneck share stage_dims[2].
struct ModelConfig {
  std::string variant = "custom";
  std::array<std::int64_t, 3> stage_dims{};
  std::array<std::int64_t, 4> encoder_depths{};  // indexed by stage 1..4
  std::int64_t bottleneck_depth = 0;
  std::array<std::int64_t, 4> decoder_depths{};  // indexed by stage 1..4
  std::int64_t cond_dim = 0;
  std::int64_t window = 8;
  std::int64_t state_dim = 16;
  std::int64_t num_classes = 1000;
  std::int64_t in_channels = 4;
  ModelFlags flags;
  ssm::ZohMode zoh = ssm::ZohMode::simplified;

  /// Width of stage s in 1..4 (4 == bottleneck width).
  std::int64_t dim_of_stage(int s) const;
  /// Spatial downsampling factor of stage s relative to the embedded grid.
  std::int64_t down_of_stage(int s) const;
  std::int64_t out_channels() const { return 2 * in_channels; }
  void validate() const;
};

ModelConfig preset(const std::string& name);  // S, B, L, XL, T
const std::vector<std::string>& preset_names();

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

/// Execution-order description of one block, enough to rebuild it alone.
struct BlockSlot {
  int stage = 0;            // canonical index 0..8
  int block = 0;
  std::int64_t dim = 0;
  std::int64_t down = 1;    // grid downsampling factor relative to the embedded grid
  bool shifted = false;
  std::string prefix() const;
};

/// Canonical stage names in execution order: enc1..enc4, bottleneck, dec4..dec1.
inline constexpr std::array<const char*, 9> kStageNames = {
    "enc1", "enc2", "enc3", "enc4", "bottleneck", "dec4", "dec3", "dec2", "dec1"};

std::vector<BlockSlot> block_layout(const ModelConfig& cfg);
BlockOptions block_options(const ModelConfig& cfg, const BlockSlot& slot);

struct PatchMerge {
  LayerNormAffine norm;  // over 4D
  Linear proj;           // 4D -> 2D, no bias
};

struct PatchExpand {
  Linear proj;           // D -> 2D, no bias
  LayerNormAffine norm;  // over D/2
};

/// 2x2 neighbours concatenated in row-major order (0,0),(0,1),(1,0),(1,1).
ad::Var space_to_depth(const ad::Var& x);
/// Inverse layout: each token's 4 channel chunks become a 2x2 block.
ad::Var depth_to_space(const ad::Var& x);

ad::Var patch_merge(const ad::Var& x, const PatchMerge& p);
ad::Var patch_expand(const ad::Var& x, const PatchExpand& p);

/// Sinusoidal features: [sin(t f_0..f_127), cos(t f_0..f_127)], f_i = 10000^(-i/128).
inline constexpr std::int64_t kTimestepFeatures = 256;
Tensor timestep_features(double t, std::int64_t width = kTimestepFeatures);

struct TimestepEmbedder {
  Linear fc1;  // 256 -> C
  Linear fc2;  // C -> C
};

struct OutputHead {
  AdaLnMap adaln;  // (gamma, beta) only
  Linear proj;     // D1 -> 8 * p^2, zero-initialized
};

struct ModelOutput {
  ad::Var eps;          // [h, w, 4]
  ad::Var sigma_logit;  // [h, w, 4]
};

/// All parameter handles of a model, grouped by component.
struct ModelParts {
  Linear embed;
  TimestepEmbedder t_embed;
  ad::Var label_table;                           // [num_classes + 1, C]; last row = null label
  std::vector<std::vector<BlockParams>> stages;  // 9 entries in execution order
  std::array<PatchMerge, 2> merges;
  std::array<PatchExpand, 2> expands;
  OutputHead head;
};

/// Declares every parameter of `cfg` through `pb`. In census mode only names
/// and shapes are recorded and the returned handles are empty.
ModelParts declare_model(const ModelConfig& cfg, ParamBuilder& pb);

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ad::Var>& parameters() const { return builder_.params(); }
  const std::vector<ParamSpec>& specs() const { return builder_.specs(); }
  std::int64_t num_params() const { return builder_.count(); }
  std::optional<ad::Var> find(const std::string& name) const;

  /// c = timestep embedding + label embedding. t in [0, T), label in [0, num_classes].
  ad::Var condition(std::int64_t t, std::int64_t label) const;
  ad::Var embed(const ad::Var& z) const;
  ModelOutput forward(const ad::Var& z, std::int64_t t, std::int64_t label) const;
  ModelOutput forward(const Tensor& z, std::int64_t t, std::int64_t label) const;

  const ModelParts& parts() const { return parts_; }

 private:
  ModelConfig cfg_;
  ParamBuilder builder_;
  ModelParts parts_;
};

std::int64_t count_params(const ModelConfig& cfg);
std::int64_t count_params(const Model& model);
/// Names and shapes in declaration order, without allocating values.
std::vector<ParamSpec> param_specs(const ModelConfig& cfg);

/// Builds the parameters of one block only; values are identical to the same
/// block inside a full model built with the same seed (per-name RNG streams).
BlockParams build_block(const ModelConfig& cfg, const BlockSlot& slot, std::uint64_t seed);

}  // namespace lamamba
