#pragma once

#include "coopuq/common.hpp"
#include "coopuq/rng.hpp"

namespace coopuq {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Shared by Adam and the samplers; unused fields stay at their defaults.
struct OptimizerState {
  long step_count = 0;
  ParamVector first_moment;
  ParamVector second_moment;
  ParamVector preconditioner;  // pSGLD EMA of squared gradients, init to ones

  static OptimizerState zeros(Eigen::Index n);
};

struct SgldConfig {
  double learning_rate = 1e-5;
  long n_total = 0;     // N, dataset size
  long batch_size = 0;  // M; 0 means full batch
  // Scales the injected-noise variance; 1 is the sampler, 0 turns the rule
  // into preconditioned gradient ascent.
  double temperature = 1.0;
  // pSGLD only.
  double precond_smoothing = 0.99;
  double precond_epsilon = 1e-5;
  // Optional 1/(1 + decay*t) step-size decay; 0 keeps eta constant.
  double lr_decay = 0.0;

  long effective_batch(long rows) const { return batch_size > 0 ? batch_size : rows; }
  double step_size(long t) const {
    return lr_decay > 0.0 ? learning_rate / (1.0 + lr_decay * static_cast<double>(t))
                          : learning_rate;
  }
};

// Standard bias-corrected Adam. Throws DivergenceError on non-finite
// gradients, tagging the current step count.
void adam_step(OptimizerState& state, ParamVector& params, const ParamVector& grad,
               const AdamConfig& cfg);

// One Langevin step:
//   delta = (eta/2) * [grad_log_prior + (N/M) * grad_log_lik_batch] + noise,
// noise ~ N(0, temperature * eta * I). grad_log_lik_batch must already be the
// sum over the minibatch. step_index feeds the decay schedule.
void sgld_step(ParamVector& params, const ParamVector& grad_log_prior,
               const ParamVector& grad_log_lik_batch, const SgldConfig& cfg, long step_index,
               Rng& rng);

// SGLD with an RMSProp diagonal preconditioner. state.preconditioner holds
// the EMA of squared per-point mean gradients; G = 1/(eps + sqrt(ema)).
// Update (eta/2)*G*total_grad + noise with per-coordinate variance
// temperature*eta*G. The preconditioner-derivative correction term is
// deliberately omitted.
void psgld_step(OptimizerState& state, ParamVector& params, const ParamVector& grad_log_prior,
                const ParamVector& grad_log_lik_batch, const SgldConfig& cfg, long step_index,
                Rng& rng);

}  // namespace coopuq
