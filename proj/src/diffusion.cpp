#include "lamamba/diffusion.hpp"

#include <cmath>
#include <numbers>

namespace lamamba::diffusion {

using ad::Var;

namespace {

DiffusionSchedule from_betas(std::vector<double> betas, std::vector<std::int64_t> model_t) {
  DiffusionSchedule s;
  const auto T = static_cast<std::int64_t>(betas.size());
  s.steps = T;
  s.beta = std::move(betas);
  s.model_t = std::move(model_t);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  s.alpha_bar_prev.resize(T);
  s.beta_tilde.resize(T);
  s.log_beta_tilde_clipped.resize(T);
  s.post_coef_z0.resize(T);
  s.post_coef_zt.resize(T);
  double cum = 1.0;
  for (std::int64_t t = 0; t < T; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar_prev[t] = cum;
    cum *= s.alpha[t];
    s.alpha_bar[t] = cum;
    s.beta_tilde[t] = s.beta[t] * (1.0 - s.alpha_bar_prev[t]) / (1.0 - s.alpha_bar[t]);
    s.post_coef_z0[t] = s.beta[t] * std::sqrt(s.alpha_bar_prev[t]) / (1.0 - s.alpha_bar[t]);
    s.post_coef_zt[t] = (1.0 - s.alpha_bar_prev[t]) * std::sqrt(s.alpha[t]) / (1.0 - s.alpha_bar[t]);
  }
  // The posterior variance is 0 at the first step; its log is clipped to the
  // second step's value (or to log beta for a one-step chain).
  for (std::int64_t t = 0; t < T; ++t) {
    const double bt = t == 0 ? (T > 1 ? s.beta_tilde[1] : s.beta[0]) : s.beta_tilde[t];
    s.log_beta_tilde_clipped[t] = std::log(bt);
  }
  return s;
}

void check_step(const DiffusionSchedule& s, std::int64_t t) {
  if (t < 0 || t >= s.steps) {
    throw ContractError("diffusion step " + std::to_string(t) + " outside [0, " + std::to_string(s.steps) + ")");
  }
}

}  // namespace

DiffusionSchedule make_schedule(std::int64_t steps, double beta_1, double beta_T) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta_1 > 0.0 && beta_1 <= beta_T && beta_T < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_1 <= beta_T < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  std::vector<std::int64_t> ids(static_cast<std::size_t>(steps));
  const double step = steps > 1 ? (beta_T - beta_1) / static_cast<double>(steps - 1) : 0.0;
  for (std::int64_t t = 0; t < steps; ++t) {
    betas[t] = beta_1 + step * static_cast<double>(t);
    ids[t] = t;
  }
  return from_betas(std::move(betas), std::move(ids));
}

std::vector<std::int64_t> strided_steps(std::int64_t total, std::int64_t count) {
  if (count < 1 || count > total) {
    throw ConfigError("cannot take " + std::to_string(count) + " steps from " + std::to_string(total));
  }
  std::vector<std::int64_t> out;
  const double stride = count > 1 ? static_cast<double>(total - 1) / static_cast<double>(count - 1) : 1.0;
  double cur = 0.0;
  for (std::int64_t i = 0; i < count; ++i) {
    out.push_back(static_cast<std::int64_t>(std::nearbyint(cur)));  // ties to even
    cur += stride;
  }
  return out;
}

DiffusionSchedule respace(const DiffusionSchedule& base, std::int64_t count) {
  const auto keep = strided_steps(base.steps, count);
  std::vector<double> betas;
  std::vector<std::int64_t> ids;
  double last = 1.0;
  for (auto t : keep) {
    betas.push_back(1.0 - base.alpha_bar[t] / last);
    last = base.alpha_bar[t];
    ids.push_back(base.model_t[t]);
  }
  return from_betas(std::move(betas), std::move(ids));
}

Tensor q_sample(const Tensor& z0, std::int64_t t, const Tensor& eps, const DiffusionSchedule& s) {
  check_step(s, t);
  if (z0.shape() != eps.shape()) throw DimensionError("q_sample: noise shape differs from z0");
  const double a = std::sqrt(s.alpha_bar[t]);
  const double b = std::sqrt(1.0 - s.alpha_bar[t]);
  Tensor out(z0.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

Var normal_kl(const Var& mean1, const Var& logvar1, const Var& mean2, const Var& logvar2) {
  Var diff = ad::sub(mean1, mean2);
  Var t1 = ad::sub(logvar2, logvar1);
  Var t2 = ad::exp(ad::sub(logvar1, logvar2));
  Var t3 = ad::mul(ad::square(diff), ad::exp(ad::scale(logvar2, -1.0)));
  return ad::scale(ad::add_scalar(ad::add(ad::add(t1, t2), t3), -1.0), 0.5);
}

Var model_log_variance(const Var& sigma_logit, const DiffusionSchedule& s, std::int64_t t) {
  check_step(s, t);
  const double log_beta = std::log(s.beta[t]);
  const double log_tilde = s.log_beta_tilde_clipped[t];
  Var v = ad::add_scalar(ad::scale(sigma_logit, 0.5), 0.5);
  Var one_minus_v = ad::add_scalar(ad::scale(v, -1.0), 1.0);
  return ad::add(ad::scale(v, log_beta), ad::scale(one_minus_v, log_tilde));
}

namespace {

// mu = (z - beta / sqrt(1 - abar) * eps) / sqrt(alpha)
Tensor model_mean(const Tensor& z, const Tensor& eps, const DiffusionSchedule& s, std::int64_t t) {
  const double k = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
  const double inv = 1.0 / std::sqrt(s.alpha[t]);
  Tensor mu(z.shape());
  for (std::int64_t i = 0; i < mu.numel(); ++i) mu[i] = (z[i] - k * eps[i]) * inv;
  return mu;
}

// Same interpolation as model_log_variance, on plain tensors.
Tensor log_variance_values(const Tensor& logit, const DiffusionSchedule& s, std::int64_t t) {
  const double log_beta = std::log(s.beta[t]);
  const double log_tilde = s.log_beta_tilde_clipped[t];
  Tensor lv(logit.shape());
  for (std::int64_t i = 0; i < lv.numel(); ++i) {
    const double v = logit[i] * 0.5 + 0.5;
    lv[i] = v * log_beta + (v * -1.0 + 1.0) * log_tilde;
  }
  return lv;
}

}  // namespace

LossTerms example_loss(const Model& model, const Example& ex, const DiffusionSchedule& s,
                       const Tensor* frozen_eps) {
  check_step(s, ex.t);
  const Tensor zt = q_sample(ex.z0, ex.t, ex.eps, s);
  ModelOutput out = model.forward(zt, s.model_t[ex.t], ex.label);

  Var mse = ad::mean(ad::square(ad::sub(out.eps, ad::constant(ex.eps))));

  // The KL term trains only the variance: the mean uses a detached eps.
  const Tensor eps_for_mean = frozen_eps ? *frozen_eps : out.eps.value();
  Var mu_model = ad::constant(model_mean(zt, eps_for_mean, s, ex.t));
  Tensor mu_true(zt.shape());
  for (std::int64_t i = 0; i < zt.numel(); ++i) {
    mu_true[i] = s.post_coef_z0[ex.t] * ex.z0[i] + s.post_coef_zt[ex.t] * zt[i];
  }
  Var lv_true = ad::constant(Tensor(zt.shape(), s.log_beta_tilde_clipped[ex.t]));
  Var lv_model = model_log_variance(out.sigma_logit, s, ex.t);
  Var kl = normal_kl(ad::constant(mu_true), lv_true, mu_model, lv_model);
  Var vlb = ad::scale(ad::mean(kl), 1.0 / std::numbers::ln2);

  LossTerms r;
  r.total = ad::add(mse, vlb);
  r.l_simple = mse.value().item();
  r.l_vlb = vlb.value().item();
  return r;
}

std::vector<Example> draw_examples(const TrainBatch& batch, const DiffusionSchedule& s,
                                   std::int64_t null_label, double p_drop, Rng& rng) {
  if (batch.z0.size() != batch.labels.size()) throw ContractError("batch latents/labels size mismatch");
  std::vector<Example> out;
  out.reserve(batch.z0.size());
  for (std::size_t i = 0; i < batch.z0.size(); ++i) {
    Example ex;
    ex.z0 = batch.z0[i];
    ex.t = rng.uniform_int(0, s.steps - 1);
    ex.eps = rand_normal(rng, ex.z0.shape());
    ex.label = rng.uniform() < p_drop ? null_label : batch.labels[i];
    out.push_back(std::move(ex));
  }
  return out;
}

LossTerms hybrid_loss(const Model& model, const TrainBatch& batch, const DiffusionSchedule& s, Rng& rng,
                      double p_drop) {
  const auto examples = draw_examples(batch, s, model.config().num_classes, p_drop, rng);
  if (examples.empty()) throw ContractError("hybrid_loss on an empty batch");
  LossTerms sum;
  for (const auto& ex : examples) {
    LossTerms one = example_loss(model, ex, s);
    sum.total = sum.total.defined() ? ad::add(sum.total, one.total) : one.total;
    sum.l_simple += one.l_simple;
    sum.l_vlb += one.l_vlb;
  }
  const double inv = 1.0 / static_cast<double>(examples.size());
  sum.total = ad::scale(sum.total, inv);
  sum.l_simple *= inv;
  sum.l_vlb *= inv;
  const double total = sum.total.value().item();
  if (!std::isfinite(total)) throw TrainingError("non-finite hybrid loss");
  return sum;
}

Guided cfg_predict(const Model& model, const Tensor& z, std::int64_t model_t, std::int64_t label, double scale) {
  if (!(scale >= 0.0)) throw ContractError("guidance scale must be >= 0");
  ad::NoGradGuard no_grad;
  const std::int64_t null_label = model.config().num_classes;
  if (label == null_label || scale == 1.0) {
    ModelOutput c = model.forward(z, model_t, label);
    return {c.eps.value(), c.sigma_logit.value()};
  }
  ModelOutput u = model.forward(z, model_t, null_label);
  if (scale == 0.0) return {u.eps.value(), u.sigma_logit.value()};
  ModelOutput c = model.forward(z, model_t, label);
  Tensor eps(z.shape());
  const Tensor& eu = u.eps.value();
  const Tensor& ec = c.eps.value();
  for (std::int64_t i = 0; i < eps.numel(); ++i) eps[i] = eu[i] + scale * (ec[i] - eu[i]);
  return {eps, c.sigma_logit.value()};
}

Tensor ddpm_sample_with(const Predictor& predict, const DiffusionSchedule& spaced, const Shape& shape,
                        SigmaMode sigma, Rng& rng) {
  Tensor z = rand_normal(rng, shape);
  for (std::int64_t i = spaced.steps - 1; i >= 0; --i) {
    Guided g = predict(z, i);
    Tensor mu = model_mean(z, g.eps, spaced, i);
    if (i == 0) {
      z = std::move(mu);
      break;
    }
    Tensor lv;
    switch (sigma) {
      case SigmaMode::learned:
        lv = log_variance_values(g.sigma_logit, spaced, i);
        break;
      case SigmaMode::force_v0:
        lv = log_variance_values(Tensor(shape, -1.0), spaced, i);
        break;
      case SigmaMode::posterior:
        lv = Tensor(shape, spaced.log_beta_tilde_clipped[i]);
        break;
    }
    Tensor noise = rand_normal(rng, shape);
    for (std::int64_t k = 0; k < z.numel(); ++k) z[k] = mu[k] + std::exp(0.5 * lv[k]) * noise[k];
    ensure_finite(z, "ddpm_sample");
  }
  return z;
}

Tensor ddpm_sample(const Model& model, const DiffusionSchedule& base, std::int64_t label, const Shape& shape,
                   const SampleOptions& opts, Rng& rng) {
  const DiffusionSchedule spaced = respace(base, opts.steps);
  auto predict = [&](const Tensor& z, std::int64_t i) {
    return cfg_predict(model, z, spaced.model_t[i], label, opts.cfg_scale);
  };
  return ddpm_sample_with(predict, spaced, shape, opts.sigma, rng);
}

void ema_update(std::vector<Tensor>& ema, std::span<const Var> params, double decay) {
  if (ema.size() != params.size()) throw ContractError("ema_update: parameter count mismatch");
  const double keep = 1.0 - decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& p = params[k].value();
    Tensor& e = ema[k];
    if (e.shape() != p.shape()) throw DimensionError("ema_update: shape mismatch for " + params[k].name());
    for (std::int64_t i = 0; i < e.numel(); ++i) e[i] = decay * e[i] + keep * p[i];
  }
}

TrainState train(Model& model, const TrainBatch& data, const DiffusionSchedule& s, const TrainOptions& opts,
                 const std::function<void(const StepLog&)>& on_step) {
  if (data.z0.empty()) throw ContractError("training set is empty");
  if (opts.batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<Var> params = model.parameters();
  std::vector<std::string> names;
  for (const auto& p : params) names.push_back(p.name());

  TrainState st;
  st.adam = ad::adamw_init(params);
  for (const auto& p : params) st.ema.push_back(p.value());

  Rng rng = Rng::derive(opts.seed, "train");
  const auto K = static_cast<std::int64_t>(data.z0.size());
  for (std::int64_t step = 0; step < opts.steps; ++step) {
    TrainBatch batch;
    for (std::int64_t i = 0; i < opts.batch_size; ++i) {
      const auto k = static_cast<std::size_t>((step * opts.batch_size + i) % K);
      batch.z0.push_back(data.z0[k]);
      batch.labels.push_back(data.labels[k]);
    }
    LossTerms loss;
    try {
      loss = hybrid_loss(model, batch, s, rng, opts.p_drop);
    } catch (const TrainingError& e) {
      throw TrainingError("step " + std::to_string(step) + ": " + e.what());
    } catch (const NumericError& e) {
      throw TrainingError("step " + std::to_string(step) + ": " + e.what());
    }
    auto grads = ad::grad(loss.total, params);
    try {
      ad::adamw_step(params, grads, st.adam, opts.adam, names);
    } catch (const TrainingError& e) {
      throw TrainingError("step " + std::to_string(step) + ": " + e.what());
    }
    ema_update(st.ema, params, opts.ema_decay);
    StepLog row{step, loss.l_simple, loss.l_vlb, loss.total.value().item()};
    st.log.push_back(row);
    if (on_step) on_step(row);
  }
  return st;
}

double probe_l_simple(const Model& model, const TrainBatch& data, const DiffusionSchedule& s, std::uint64_t seed,
                      std::int64_t per_sample) {
  ad::NoGradGuard no_grad;
  Rng rng = Rng::derive(seed, "probe");
  double sum = 0.0;
  std::int64_t n = 0;
  for (std::size_t k = 0; k < data.z0.size(); ++k) {
    for (std::int64_t j = 0; j < per_sample; ++j) {
      const std::int64_t t = rng.uniform_int(0, s.steps - 1);
      Tensor eps = rand_normal(rng, data.z0[k].shape());
      ModelOutput out = model.forward(q_sample(data.z0[k], t, eps, s), s.model_t[t], data.labels[k]);
      const Tensor& e = out.eps.value();
      double acc = 0.0;
      for (std::int64_t i = 0; i < e.numel(); ++i) acc += (e[i] - eps[i]) * (e[i] - eps[i]);
      sum += acc / static_cast<double>(e.numel());
      ++n;
    }
  }
  return sum / static_cast<double>(n);
}

}  // namespace lamamba::diffusion
