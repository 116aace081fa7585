#include "coopuq/optim.hpp"

#include <cmath>

namespace coopuq {

namespace {

void require_finite(const ParamVector& v, const char* who, long step) {
  if (!v.allFinite()) throw DivergenceError(std::string(who) + ": non-finite gradient", step);
}

void require_shape(const ParamVector& a, const ParamVector& b, const char* who) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

double likelihood_scale(const SgldConfig& cfg) {
  long n = cfg.n_total;
  long m = cfg.effective_batch(n);
  if (n <= 0 || m <= 0 || m > n)
    throw std::invalid_argument("SgldConfig: need 0 < batch <= n_total");
  return static_cast<double>(n) / static_cast<double>(m);
}

}  // namespace

OptimizerState OptimizerState::zeros(Eigen::Index n) {
  OptimizerState s;
  s.first_moment = ParamVector::Zero(n);
  s.second_moment = ParamVector::Zero(n);
  s.preconditioner = ParamVector::Ones(n);
  return s;
}

void adam_step(OptimizerState& state, ParamVector& params, const ParamVector& grad,
               const AdamConfig& cfg) {
  require_shape(params, grad, "adam_step");
  require_shape(params, state.first_moment, "adam_step");
  require_finite(grad, "adam_step", state.step_count);
  state.step_count += 1;
  double t = static_cast<double>(state.step_count);
  state.first_moment = cfg.beta1 * state.first_moment + (1.0 - cfg.beta1) * grad;
  state.second_moment =
      cfg.beta2 * state.second_moment + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  double bc1 = 1.0 - std::pow(cfg.beta1, t);
  double bc2 = 1.0 - std::pow(cfg.beta2, t);
  params.array() -= cfg.learning_rate * (state.first_moment.array() / bc1) /
                    ((state.second_moment.array() / bc2).sqrt() + cfg.epsilon);
}

void sgld_step(ParamVector& params, const ParamVector& grad_log_prior,
               const ParamVector& grad_log_lik_batch, const SgldConfig& cfg, long step_index,
               Rng& rng) {
  require_shape(params, grad_log_prior, "sgld_step");
  require_shape(params, grad_log_lik_batch, "sgld_step");
  require_finite(grad_log_prior, "sgld_step", step_index);
  require_finite(grad_log_lik_batch, "sgld_step", step_index);
  double eta = cfg.step_size(step_index);
  double scale = likelihood_scale(cfg);
  double half_eta = 0.5 * eta;
  double noise_var = cfg.temperature * eta;
  double noise_std = std::sqrt(noise_var);
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    double total = grad_log_prior[i] + scale * grad_log_lik_batch[i];
    params[i] += half_eta * total + noise_std * rng.normal();
  }
}

void psgld_step(OptimizerState& state, ParamVector& params, const ParamVector& grad_log_prior,
                const ParamVector& grad_log_lik_batch, const SgldConfig& cfg, long step_index,
                Rng& rng) {
  require_shape(params, grad_log_prior, "psgld_step");
  require_shape(params, grad_log_lik_batch, "psgld_step");
  require_shape(params, state.preconditioner, "psgld_step");
  require_finite(grad_log_prior, "psgld_step", step_index);
  require_finite(grad_log_lik_batch, "psgld_step", step_index);
  double eta = cfg.step_size(step_index);
  double scale = likelihood_scale(cfg);
  double m = static_cast<double>(cfg.effective_batch(cfg.n_total));
  double s = cfg.precond_smoothing;
  double half_eta = 0.5 * eta;
  double noise_var = cfg.temperature * eta;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    double g_mean = grad_log_lik_batch[i] / m;
    state.preconditioner[i] = s * state.preconditioner[i] + (1.0 - s) * g_mean * g_mean;
    double precond = 1.0 / (cfg.precond_epsilon + std::sqrt(state.preconditioner[i]));
    double total = grad_log_prior[i] + scale * grad_log_lik_batch[i];
    params[i] += half_eta * (precond * total) + std::sqrt(noise_var * precond) * rng.normal();
  }
  state.step_count += 1;
}

}  // namespace coopuq
