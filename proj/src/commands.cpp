#include "lamamba/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace lamamba::cli {

using ad::Var;

ModelConfig resolve_config(const GlobalOptions& g) {
  if (g.config_path.empty()) return preset(g.preset);
  std::ifstream in(g.config_path);
  if (!in) throw ConfigError("cannot open config file '" + g.config_path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + g.config_path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

int cmd_flops(const GlobalOptions& g, const FlopsOptions& o, std::ostream& out) {
  const ModelConfig cfg = resolve_config(g);
  const auto report = flops::flops_model(cfg, o.resolution, o.mode);
  out << report.table();
  if (!g.out.empty()) {
    std::ofstream f(g.out);
    if (!f) throw std::runtime_error("cannot write '" + g.out + "'");
    f << report.to_json().dump(2) << "\n";
  }
  return 0;
}

int cmd_synth(const GlobalOptions& g, const SynthOptions& o, std::ostream& out) {
  if (g.out.empty()) throw ConfigError("synth needs --out");
  if (o.count < 1 || o.size < 1) throw ConfigError("synth needs positive --count and --size");
  const ModelConfig cfg = resolve_config(g);
  Rng rng = Rng::derive(g.seed, "synth");
  Tensor latents = rand_normal(rng, {o.count, o.size, o.size, cfg.in_channels});
  Tensor labels(Shape{o.count});
  for (std::int64_t k = 0; k < o.count; ++k) labels[k] = static_cast<double>(k % cfg.num_classes);
  lmdf::Container c;
  c.add("latents", latents.cast(DType::f32));
  c.add("labels", labels.cast(DType::f32));
  lmdf::write_file(g.out, c);
  out << "wrote " << o.count << " latents of " << o.size << "x" << o.size << "x" << cfg.in_channels << " to "
      << g.out << "\n";
  return 0;
}

lmdf::Container make_checkpoint(const Model& model, const std::vector<Tensor>* ema, DType dtype) {
  lmdf::Container c;
  const auto& params = model.parameters();
  for (const auto& p : params) c.add(p.name(), p.value().cast(dtype));
  if (ema) {
    if (ema->size() != params.size()) throw ContractError("EMA state does not match the model");
    for (std::size_t k = 0; k < params.size(); ++k) c.add(kEmaPrefix + params[k].name(), (*ema)[k].cast(dtype));
  }
  return c;
}

void load_checkpoint(Model& model, const lmdf::Container& ckpt, bool use_ema) {
  for (const auto& p : model.parameters()) {
    std::string key = p.name();
    if (use_ema && ckpt.contains(kEmaPrefix + key)) key = kEmaPrefix + key;
    if (!ckpt.contains(key)) throw FormatError("checkpoint is missing parameter '" + p.name() + "'");
    const Tensor& t = ckpt.get(key);
    if (t.shape() != p.shape()) {
      throw DimensionError("checkpoint tensor '" + key + "' has shape " + shape_str(t.shape()) + ", model expects " +
                           shape_str(p.shape()));
    }
    Var handle = p;
    Tensor& dst = handle.mutable_value();
    for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] = t[i];
  }
}

diffusion::TrainBatch load_dataset(const std::filesystem::path& path, std::int64_t num_classes) {
  const auto c = lmdf::read_file(path);
  if (!c.contains("latents") || !c.contains("labels")) {
    throw FormatError("dataset '" + path.string() + "' needs 'latents' and 'labels' tensors");
  }
  const Tensor& lat = c.get("latents");
  const Tensor& lab = c.get("labels");
  if (lat.rank() != 4 || lab.rank() != 1 || lab.dim(0) != lat.dim(0)) {
    throw DimensionError("dataset expects latents [K,h,w,c] and labels [K], got " + shape_str(lat.shape()) + " and " +
                         shape_str(lab.shape()));
  }
  diffusion::TrainBatch b;
  const std::int64_t K = lat.dim(0);
  const std::int64_t per = lat.numel() / K;
  for (std::int64_t k = 0; k < K; ++k) {
    std::vector<double> v(lat.data().begin() + k * per, lat.data().begin() + (k + 1) * per);
    b.z0.emplace_back(Shape{lat.dim(1), lat.dim(2), lat.dim(3)}, std::move(v));
    const double l = lab[k];
    if (l != std::floor(l) || l < 0 || l > static_cast<double>(num_classes)) {
      throw FormatError("dataset label " + fmt(l) + " is not a class index in [0, " + std::to_string(num_classes) +
                        "]");
    }
    b.labels.push_back(static_cast<std::int64_t>(l));
  }
  return b;
}

int cmd_train(const GlobalOptions& g, const TrainCmdOptions& o, std::ostream& out) {
  if (g.out.empty()) throw ConfigError("train needs --out for the checkpoint");
  if (o.dataset.empty()) throw ConfigError("train needs --dataset");
  if (o.steps < 0) throw ConfigError("--steps must be >= 0");
  const ModelConfig cfg = resolve_config(g);
  const auto data = load_dataset(o.dataset, cfg.num_classes);
  Model model(cfg, g.seed);
  const auto sched = diffusion::make_schedule();

  const std::string log_path = o.log_path.empty() ? g.out + ".loss.csv" : o.log_path;
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write loss log '" + log_path + "'");
  log << "step,l_simple,l_vlb,total\n";

  diffusion::TrainOptions opts;
  opts.steps = o.steps;
  opts.batch_size = o.batch_size;
  opts.adam.lr = o.lr;
  opts.seed = g.seed;
  const auto state = diffusion::train(model, data, sched, opts, [&](const diffusion::StepLog& r) {
    log << r.step << "," << fmt(r.l_simple) << "," << fmt(r.l_vlb) << "," << fmt(r.total) << "\n";
    if ((r.step + 1) % 100 == 0 || r.step == 0) {
      out << "step " << r.step << "  l_simple " << fixed(r.l_simple, 6) << "  l_vlb " << fixed(r.l_vlb, 6) << "\n";
      out.flush();
    }
  });
  lmdf::write_file(g.out, make_checkpoint(model, &state.ema, g.dtype));
  out << "trained " << o.steps << " steps on " << data.z0.size() << " latents; checkpoint " << g.out << ", log "
      << log_path << "\n";
  return 0;
}

int cmd_sample(const GlobalOptions& g, const SampleCmdOptions& o, std::ostream& out) {
  if (g.out.empty()) throw ConfigError("sample needs --out");
  if (o.checkpoint.empty()) throw ConfigError("sample needs --checkpoint");
  if (o.labels.empty()) throw ConfigError("sample needs at least one label");
  const ModelConfig cfg = resolve_config(g);
  Model model(cfg, g.seed);
  load_checkpoint(model, lmdf::read_file(o.checkpoint), o.use_ema);
  const auto sched = diffusion::make_schedule();

  diffusion::SampleOptions so;
  so.steps = o.steps;
  so.cfg_scale = o.cfg_scale;
  Rng rng = Rng::derive(g.seed, "sample");
  const auto n = static_cast<std::int64_t>(o.labels.size());
  const Shape shape{o.size, o.size, cfg.in_channels};
  Tensor samples(Shape{n, o.size, o.size, cfg.in_channels});
  Tensor labels(Shape{n});
  for (std::int64_t k = 0; k < n; ++k) {
    const Tensor z = diffusion::ddpm_sample(model, sched, o.labels[k], shape, so, rng);
    std::copy(z.data().begin(), z.data().end(), samples.data().begin() + k * z.numel());
    labels[k] = static_cast<double>(o.labels[k]);
  }
  lmdf::Container c;
  c.add("samples", samples.cast(g.dtype));
  c.add("labels", labels.cast(g.dtype));
  c.add("cfg_scale", Tensor::scalar(o.cfg_scale).cast(g.dtype));
  c.add("seed", Tensor::scalar(static_cast<double>(g.seed)).cast(g.dtype));
  lmdf::write_file(g.out, c);
  out << "sampled " << n << " latents of " << shape_str(shape) << " with " << o.steps << " steps, cfg scale "
      << o.cfg_scale << " -> " << g.out << "\n";
  return 0;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Evaluation point for the sweep: every weight moved by N(0, stddev), step
// sizes of order one and open residual gates. At the init point (Δ <= 0.1,
// α = 0) many gradients are ~1e-7 and central differences at h = 1e-5 cannot
// resolve them to 1e-4 relative accuracy.
void perturb(const std::vector<Var>& params, Rng& rng, double stddev) {
  for (Var p : params) {
    Tensor& v = p.mutable_value();
    for (auto& x : v.data()) x += stddev * rng.normal();
    if (ends_with(p.name(), ".dt_proj.bias")) {
      for (auto& x : v.data()) x = std::log(std::expm1(0.3 + 0.7 * rng.uniform()));  // Δ in [0.3, 1)
    }
    const bool block_gate = p.name().find(".adaln") != std::string::npos && ends_with(p.name(), ".bias") &&
                            p.name().rfind("head.", 0) != 0;
    if (block_gate) {
      const std::int64_t d = v.numel() / 3;
      for (std::int64_t i = 2 * d; i < 3 * d; ++i) v[i] += 1.0;
    }
  }
}

}  // namespace

std::vector<GroupResult> run_gradcheck(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& o) {
  std::vector<GroupResult> results;
  Rng rng = Rng::derive(seed, "gradcheck");
  ad::FiniteDiffOptions fd;
  fd.seed = seed;
  fd.h = o.h;
  fd.stencil = o.stencil;

  // One block of each kind at the first stage's width on a 4x4 grid.
  const auto layout = block_layout(cfg);
  for (bool shifted : {false, true}) {
    BlockSlot slot = layout.at(0);
    slot.block = shifted ? 1 : 0;
    slot.shifted = shifted;
    ParamBuilder pb(seed);
    const BlockParams bp = make_block_params(pb, slot.prefix(), slot.dim, cfg.cond_dim, block_options(cfg, slot));
    perturb(pb.params(), rng, 0.1);
    const Var x = ad::constant(rand_normal(rng, {4, 4, slot.dim}));
    const Var c = ad::constant(rand_normal(rng, {cfg.cond_dim}));
    const Var w = ad::constant(rand_normal(rng, {4, 4, slot.dim}));
    auto loss = [&] { return ad::sum(ad::mul(lamamba_block(x, c, bp), w)); };
    fd.max_coords = o.block_coords;
    const std::string kind = shifted ? "block.shifted." : "block.plain.";
    for (const auto& p : pb.params()) {
      const auto r = ad::finite_diff_check_param(loss, p, fd);
      results.push_back({kind + p.name().substr(slot.prefix().size() + 1), r.max_rel_error, r.coords_checked});
    }
  }

  if (o.model_coords <= 0) return results;

  // Full model, hybrid loss with the mean's eps frozen.
  Model model(cfg, seed);
  perturb(model.parameters(), rng, 0.05);
  const auto sched = diffusion::make_schedule();
  diffusion::Example ex;
  ex.z0 = rand_normal(rng, {o.model_side, o.model_side, cfg.in_channels});
  ex.eps = rand_normal(rng, ex.z0.shape());
  ex.t = 500;
  ex.label = 3 % cfg.num_classes;
  Tensor frozen;
  {
    ad::NoGradGuard ng;
    frozen = model.forward(diffusion::q_sample(ex.z0, ex.t, ex.eps, sched), ex.t, ex.label).eps.value();
  }
  auto loss = [&] { return diffusion::example_loss(model, ex, sched, &frozen).total; };
  fd.max_coords = o.model_coords;
  for (const auto& p : model.parameters()) {
    const auto r = ad::finite_diff_check_param(loss, p, fd);
    results.push_back({"model." + p.name(), r.max_rel_error, r.coords_checked});
  }
  return results;
}

int cmd_gradcheck(const GlobalOptions& g, const GradcheckOptions& o, std::ostream& out) {
  if (g.dtype != DType::f64) throw ConfigError("gradcheck runs in float64 only");
  const ModelConfig cfg = resolve_config(g);
  ad::testing::set_corrupt_backward(o.corrupt_backward);
  std::vector<GroupResult> results;
  try {
    results = run_gradcheck(cfg, g.seed, o);
  } catch (...) {
    ad::testing::set_corrupt_backward(false);
    throw;
  }
  ad::testing::set_corrupt_backward(false);

  std::vector<std::string> offenders;
  double worst = 0.0;
  for (const auto& r : results) {
    const bool ok = r.max_rel_error < kGradTolerance;
    char line[256];
    std::snprintf(line, sizeof line, "%-4s %-48s %.3e  (%lld coords)\n", ok ? "ok" : "FAIL", r.group.c_str(),
                  r.max_rel_error, static_cast<long long>(r.coords));
    out << line;
    worst = std::max(worst, r.max_rel_error);
    if (!ok) offenders.push_back(r.group);
  }
  out << "max relative error " << worst << " over " << results.size() << " groups\n";
  if (!offenders.empty()) {
    out << offenders.size() << " group(s) at or above " << kGradTolerance << ":";
    for (const auto& n : offenders) out << " " << n;
    out << "\n";
    return 1;
  }
  return 0;
}

int cmd_inspect(const std::string& path, std::ostream& out) {
  out << lmdf::manifest(lmdf::read_file(path));
  return 0;
}

}  // namespace lamamba::cli
