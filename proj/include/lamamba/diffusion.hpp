#pragma once

// DDPM machinery: linear schedule, forward corruption, hybrid loss with a
// learned-range covariance, respaced ancestral sampling, CFG and EMA.

#include <cstdint>
#include <functional>
#include <vector>

#include "lamamba/model.hpp"

namespace lamamba::diffusion {

/// Indices are 0-based: entry t describes diffusion step t+1.
struct DiffusionSchedule {
  std::int64_t steps = 0;
  std::vector<double> beta, alpha, alpha_bar, alpha_bar_prev;
  std::vector<double> beta_tilde;              // posterior variance; 0 at the first step
  std::vector<double> log_beta_tilde_clipped;  // first entry replaced by the second
  std::vector<double> post_coef_z0, post_coef_zt;
  /// Model timestep fed to the network for each entry (identity unless respaced).
  std::vector<std::int64_t> model_t;
};

inline constexpr std::int64_t kDefaultSteps = 1000;
inline constexpr std::int64_t kDefaultSampleSteps = 250;

DiffusionSchedule make_schedule(std::int64_t steps = kDefaultSteps, double beta_1 = 1e-4,
                                double beta_T = 2e-2);

/// Schedule over `count` uniformly strided steps of `base` (rounded
/// positions of (T-1)/(count-1) strides), with betas re-derived so the
/// cumulative products match the chosen steps.
DiffusionSchedule respace(const DiffusionSchedule& base, std::int64_t count);
std::vector<std::int64_t> strided_steps(std::int64_t total, std::int64_t count);

Tensor q_sample(const Tensor& z0, std::int64_t t, const Tensor& eps, const DiffusionSchedule& s);

/// KL(N(m1, e^lv1) || N(m2, e^lv2)) elementwise, in nats.
ad::Var normal_kl(const ad::Var& mean1, const ad::Var& logvar1, const ad::Var& mean2,
                  const ad::Var& logvar2);

/// Model log variance: v log(beta) + (1 - v) log(beta_tilde), v = (logit + 1) / 2.
ad::Var model_log_variance(const ad::Var& sigma_logit, const DiffusionSchedule& s, std::int64_t t);

/// Everything random about one training example, fixed up front.
struct Example {
  Tensor z0;              // [h, w, 4]
  std::int64_t label = 0; // after any label drop
  std::int64_t t = 0;     // 0-based step index
  Tensor eps;             // noise, same shape as z0
};

struct LossTerms {
  ad::Var total;  // differentiable scalar
  double l_simple = 0.0;
  double l_vlb = 0.0;
};

/// L_simple + L_vlb for one example. L_simple is the mean squared error on
/// eps; L_vlb is the per-element-mean KL to the true posterior in bits, with
/// the model mean computed from a detached eps prediction. When
/// `frozen_eps` is given it replaces that detached prediction (lets finite
/// differences see the same function backward differentiates).
LossTerms example_loss(const Model& model, const Example& ex, const DiffusionSchedule& s,
                       const Tensor* frozen_eps = nullptr);

struct TrainBatch {
  std::vector<Tensor> z0;
  std::vector<std::int64_t> labels;
};

inline constexpr double kLabelDropProb = 0.1;

/// Draws t ~ U{0..T-1}, eps ~ N(0, I) and the label drop for each element.
std::vector<Example> draw_examples(const TrainBatch& batch, const DiffusionSchedule& s,
                                   std::int64_t null_label, double p_drop, Rng& rng);

/// Batch mean of example_loss over freshly drawn examples.
LossTerms hybrid_loss(const Model& model, const TrainBatch& batch, const DiffusionSchedule& s,
                      Rng& rng, double p_drop = kLabelDropProb);

struct Guided {
  Tensor eps;
  Tensor sigma_logit;
};

/// eps = eps_u + s (eps_c - eps_u); sigma logits from the conditional pass.
/// s == 1 returns the conditional prediction and s == 0 the unconditional one.
Guided cfg_predict(const Model& model, const Tensor& z, std::int64_t model_t, std::int64_t label,
                   double scale);

enum class SigmaMode {
  learned,     // ADM interpolation from the predicted logits
  force_v0,    // logits overwritten with -1 (v = 0), still through the interpolation
  posterior,   // fixed beta_tilde (clipped), no model involvement
};

struct SampleOptions {
  std::int64_t steps = kDefaultSampleSteps;
  double cfg_scale = 1.0;
  SigmaMode sigma = SigmaMode::learned;
};

/// Ancestral sampling from z_T ~ N(0, I) using the respaced schedule; no
/// noise is added on the final step.
Tensor ddpm_sample(const Model& model, const DiffusionSchedule& base, std::int64_t label,
                   const Shape& shape, const SampleOptions& opts, Rng& rng);

/// Same recursion driven by an arbitrary eps/logit predictor (used for
/// oracles). `predict(z, step_index)` receives the respaced index.
using Predictor = std::function<Guided(const Tensor& z, std::int64_t index)>;
Tensor ddpm_sample_with(const Predictor& predict, const DiffusionSchedule& spaced, const Shape& shape,
                        SigmaMode sigma, Rng& rng);

inline constexpr double kEmaDecay = 0.9999;

/// ema <- decay ema + (1 - decay) theta.
void ema_update(std::vector<Tensor>& ema, std::span<const ad::Var> params, double decay = kEmaDecay);

struct TrainOptions {
  std::int64_t steps = 0;
  std::int64_t batch_size = 8;
  ad::AdamWConfig adam;
  double ema_decay = kEmaDecay;
  double p_drop = kLabelDropProb;
  std::uint64_t seed = 0;
};

struct StepLog {
  std::int64_t step = 0;
  double l_simple = 0.0;
  double l_vlb = 0.0;
  double total = 0.0;
};

struct TrainState {
  ad::AdamWState adam;
  std::vector<Tensor> ema;
  std::vector<StepLog> log;
};

/// Runs opts.steps optimizer steps. Batches cycle through the dataset in
/// order. Each log row holds the loss evaluated before that step's update.
TrainState train(Model& model, const TrainBatch& data, const DiffusionSchedule& s,
                 const TrainOptions& opts, const std::function<void(const StepLog&)>& on_step = {});

/// Mean L_simple over a fixed probe set: `per_sample` draws of (t, eps) per
/// latent from `seed`, labels kept. Used to compare models on equal footing.
double probe_l_simple(const Model& model, const TrainBatch& data, const DiffusionSchedule& s,
                      std::uint64_t seed, std::int64_t per_sample);

}  // namespace lamamba::diffusion
