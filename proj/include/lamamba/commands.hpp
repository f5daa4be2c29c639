#pragma once

// Subcommand implementations behind the command-line tool. Each returns a
// process exit code and writes human-readable output to `out`.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lamamba/diffusion.hpp"
#include "lamamba/flops.hpp"
#include "lamamba/lmdf.hpp"

namespace lamamba::cli {

struct GlobalOptions {
  std::uint64_t seed = 0;
  DType dtype = DType::f64;
  std::string out;
  std::string preset = "T";
  std::string config_path;  // overrides preset when set
};

ModelConfig resolve_config(const GlobalOptions& g);

struct FlopsOptions {
  std::int64_t resolution = 256;
  flops::Mode mode = flops::Mode::full;
};
int cmd_flops(const GlobalOptions& g, const FlopsOptions& o, std::ostream& out);

struct SynthOptions {
  std::int64_t count = 8;
  std::int64_t size = 8;  // latent side
};
int cmd_synth(const GlobalOptions& g, const SynthOptions& o, std::ostream& out);

struct TrainCmdOptions {
  std::string dataset;
  std::int64_t steps = 0;
  std::int64_t batch_size = 8;
  double lr = 1e-4;
  std::string log_path;  // default: <out>.loss.csv
};
int cmd_train(const GlobalOptions& g, const TrainCmdOptions& o, std::ostream& out);

struct SampleCmdOptions {
  std::string checkpoint;
  std::vector<std::int64_t> labels{0};
  double cfg_scale = 1.0;
  std::int64_t steps = diffusion::kDefaultSampleSteps;
  std::int64_t size = 8;  // latent side
  bool use_ema = true;
};
int cmd_sample(const GlobalOptions& g, const SampleCmdOptions& o, std::ostream& out);

struct GradcheckOptions {
  bool corrupt_backward = false;  // negative control
  std::int64_t block_coords = 48;
  std::int64_t model_coords = 6;  // 0 skips the full-model sweep
  std::int64_t model_side = 4;  // latent side for the full-model loss
  // Losses here are O(1) while many gradient entries are < 1e-6, below what
  // the two-point rule resolves at h = 1e-5 (noise ~ ulp(loss) / h ~ 1e-10).
  double h = 1e-3;
  int stencil = 4;
};
int cmd_gradcheck(const GlobalOptions& g, const GradcheckOptions& o, std::ostream& out);

int cmd_inspect(const std::string& path, std::ostream& out);

// Checkpoint helpers shared with tests.
inline constexpr const char* kEmaPrefix = "ema.";
lmdf::Container make_checkpoint(const Model& model, const std::vector<Tensor>* ema, DType dtype);
/// Copies raw (or EMA) weights from a checkpoint into `model`; shapes must match.
void load_checkpoint(Model& model, const lmdf::Container& ckpt, bool use_ema);

diffusion::TrainBatch load_dataset(const std::filesystem::path& path, std::int64_t num_classes);

struct GroupResult {
  std::string group;
  double max_rel_error = 0.0;
  std::int64_t coords = 0;
};
inline constexpr double kGradTolerance = 1e-4;
/// Finite-difference sweep used by `gradcheck`.
std::vector<GroupResult> run_gradcheck(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& o);

}  // namespace lamamba::cli
