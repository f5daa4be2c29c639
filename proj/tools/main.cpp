// lamamba: FLOPs audit, toy training, sampling and gradient checks for
// latent diffusion models.

#include <iostream>

#include <CLI11.hpp>

#include "lamamba/commands.hpp"

using namespace lamamba;

int main(int argc, char** argv) {
  CLI::App app{"lamamba: hybrid Mamba-attention diffusion toolkit"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  cli::GlobalOptions g;
  std::string dtype = "f64";
  app.add_option("--seed", g.seed, "RNG seed")->capture_default_str();
  app.add_option("--dtype", dtype, "storage dtype for written tensors")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();
  app.add_option("--out", g.out, "output path");
  app.add_option("--preset", g.preset, "built-in model: S, B, L, XL or T")->capture_default_str();
  app.add_option("--config", g.config_path, "model config JSON (overrides --preset)");

  cli::FlopsOptions fo;
  std::string mode = "full";
  auto* flops = app.add_subcommand("flops", "FLOPs and parameter report");
  flops->add_option("--resolution", fo.resolution, "image side in pixels")->capture_default_str();
  flops->add_option("--mode", mode, "full or analytic")
      ->check(CLI::IsMember({"full", "analytic"}))
      ->capture_default_str();

  cli::SynthOptions so;
  auto* synth = app.add_subcommand("synth", "write a synthetic latent dataset");
  synth->add_option("--count", so.count, "number of latents")->capture_default_str();
  synth->add_option("--size", so.size, "latent side")->capture_default_str();

  cli::TrainCmdOptions to;
  auto* train = app.add_subcommand("train", "train on an LMDF latent dataset");
  train->add_option("--dataset", to.dataset, "dataset path")->required();
  train->add_option("--steps", to.steps, "optimizer steps")->capture_default_str();
  train->add_option("--batch", to.batch_size, "batch size")->capture_default_str();
  train->add_option("--lr", to.lr, "AdamW learning rate")->capture_default_str();
  train->add_option("--log", to.log_path, "loss CSV path (default <out>.loss.csv)");

  cli::SampleCmdOptions sa;
  bool raw_weights = false;
  auto* sample = app.add_subcommand("sample", "ancestral DDPM sampling from a checkpoint");
  sample->add_option("--checkpoint", sa.checkpoint, "checkpoint path")->required();
  sample->add_option("--labels", sa.labels, "class labels, one sample each")->delimiter(',');
  sample->add_option("--cfg-scale", sa.cfg_scale, "classifier-free guidance scale")->capture_default_str();
  sample->add_option("--steps", sa.steps, "sampling steps")->capture_default_str();
  sample->add_option("--size", sa.size, "latent side")->capture_default_str();
  sample->add_flag("--raw", raw_weights, "use raw weights instead of the EMA");

  cli::GradcheckOptions go;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every parameter group");
  gradcheck->add_option("--block-coords", go.block_coords, "coordinates probed per block tensor")
      ->capture_default_str();
  gradcheck->add_option("--model-coords", go.model_coords, "coordinates probed per model tensor")
      ->capture_default_str();
  gradcheck->add_option("--model-side", go.model_side, "latent side of the full-model example")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--fd-step", go.h, "central-difference step")->capture_default_str()->check(CLI::PositiveNumber);
  gradcheck->add_option("--stencil", go.stencil, "2- or 4-point central difference")
      ->capture_default_str()
      ->check(CLI::IsMember({2, 4}));
  gradcheck->add_flag("--corrupt-backward", go.corrupt_backward)->group("");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "print an LMDF manifest");
  inspect->add_option("path", inspect_path, "LMDF file")->required();

  CLI11_PARSE(app, argc, argv);
  g.dtype = dtype == "f32" ? DType::f32 : DType::f64;

  try {
    if (*flops) {
      fo.mode = flops::mode_from_string(mode);
      return cli::cmd_flops(g, fo, std::cout);
    }
    if (*synth) return cli::cmd_synth(g, so, std::cout);
    if (*train) return cli::cmd_train(g, to, std::cout);
    if (*sample) {
      sa.use_ema = !raw_weights;
      return cli::cmd_sample(g, sa, std::cout);
    }
    if (*gradcheck) return cli::cmd_gradcheck(g, go, std::cout);
    if (*inspect) return cli::cmd_inspect(inspect_path, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
