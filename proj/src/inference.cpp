#include "coopuq/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "coopuq/special.hpp"

namespace coopuq {

namespace {

Matrix take_rows(const Matrix& m, const std::vector<long>& idx, long begin, long count) {
  Matrix out(count, m.cols());
  for (long i = 0; i < count; ++i) out.row(i) = m.row(idx[begin + i]);
  return out;
}

// Slice of the aleatoric variance matching a row batch; 1 x * broadcasts.
Matrix var_rows(const Matrix& var, const std::vector<long>& idx, long begin, long count) {
  if (var.rows() == 1) return var;
  return take_rows(var, idx, begin, count);
}

void check_var_rows(const Matrix& var, Eigen::Index n, const char* who) {
  if (var.rows() != 1 && var.rows() != n)
    throw std::invalid_argument(std::string(who) + ": aleatoric_var needs 1 or N rows");
  if (var.size() == 0 || var.minCoeff() <= 0.0)
    throw std::invalid_argument(std::string(who) + ": aleatoric_var must be positive");
}

std::string strip_step_suffix(const std::string& s) {
  auto pos = s.rfind(" (step ");
  return pos == std::string::npos ? s : s.substr(0, pos);
}

}  // namespace

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kPsgld: return "psgld";
    case Provenance::kMcDropout: return "mc_dropout";
    case Provenance::kBbb: return "bbb";
    case Provenance::kEnsemble: return "ensemble";
  }
  return "unknown";
}

void PosteriorEnsemble::validate() const {
  spec.validate();
  if (samples.empty()) throw std::invalid_argument("PosteriorEnsemble: no samples");
  auto want = static_cast<Eigen::Index>(spec.param_count());
  for (const auto& s : samples)
    if (s.size() != want) throw std::invalid_argument("PosteriorEnsemble: sample size mismatch");
  if (provenance == Provenance::kMcDropout) {
    if (samples.size() != 1)
      throw std::invalid_argument("PosteriorEnsemble: dropout ensembles hold one parameter set");
    if (mc_passes < 1)
      throw std::invalid_argument("PosteriorEnsemble: dropout ensembles need mc_passes >= 1");
  }
}

std::vector<Matrix> ensemble_outputs(const PosteriorEnsemble& ens, const Matrix& x) {
  ens.validate();
  if (ens.provenance == Provenance::kMcDropout)
    return predict_mc_dropout(ens.spec, ens.samples[0], x, ens.mc_passes, ens.mc_seed);
  std::vector<Matrix> out;
  out.reserve(ens.samples.size());
  for (const auto& s : ens.samples) out.push_back(forward(ens.spec, s, x));
  return out;
}

ParamVector train_map(const MlpSpec& spec, const Dataset& train, const Objective& objective,
                      const TrainConfig& cfg, const Dataset* val, const ParamVector* init) {
  spec.validate();
  train.validate();
  if (train.input_dim() != spec.input_dim)
    throw std::invalid_argument("train_map: dataset input_dim does not match spec");
  if (cfg.epochs < 0) throw ConfigError("train_map: epochs must be >= 0");
  if (cfg.patience > 0 && val == nullptr)
    throw ConfigError("train_map: patience needs a validation set");

  const long n = train.n();
  ParamVector params = init != nullptr ? *init : init_params(spec, derive_seed(cfg.seed, 0));
  if (params.size() != spec.param_count())
    throw std::invalid_argument("train_map: init has the wrong length");
  OptimizerState state = OptimizerState::zeros(params.size());
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  // Nets with a dropout rate train with fresh masks every step; validation
  // scoring below stays deterministic (no masks).
  const bool use_dropout = spec.dropout_rate > 0.0;
  Rng mask_rng(derive_seed(cfg.seed, 2));
  std::vector<long> order(n);
  std::iota(order.begin(), order.end(), 0);
  const long batch = cfg.batch_size > 0 ? std::min<long>(cfg.batch_size, n) : n;
  const double prior_scale = cfg.kappa / static_cast<double>(n);

  auto val_score = [&]() {
    return objective_value_grad(spec, params, val->x, val->y, objective, nullptr);
  };
  double best_score = std::numeric_limits<double>::infinity();
  ParamVector best_params = params;
  int since_improvement = 0;
  const bool early_stop = cfg.patience > 0;
  if (early_stop) best_score = val_score();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch < n) shuffle_rng.shuffle(order);
    double last_loss = 0.0;
    for (long start = 0; start < n; start += batch) {
      long count = std::min(batch, n - start);
      ParamVector grad;
      std::vector<Matrix> masks;
      const std::vector<Matrix>* masks_ptr = nullptr;
      if (use_dropout) {
        masks = make_dropout_masks(spec, static_cast<int>(count), mask_rng);
        masks_ptr = &masks;
      }
      if (count == n) {
        last_loss =
            objective_value_grad(spec, params, train.x, train.y, objective, &grad, masks_ptr);
      } else {
        Matrix xb = take_rows(train.x, order, start, count);
        Matrix yb = take_rows(train.y, order, start, count);
        last_loss = objective_value_grad(spec, params, xb, yb, objective, &grad, masks_ptr);
      }
      if (cfg.kappa > 0.0) {
        last_loss += 0.5 * prior_scale * params.squaredNorm();
        grad += prior_scale * params;
      }
      adam_step(state, params, grad, cfg.adam);
    }
    if (!std::isfinite(last_loss)) throw DivergenceError("train_map: non-finite loss", epoch);
    if (early_stop) {
      double score = val_score();
      if (!std::isfinite(score)) throw DivergenceError("train_map: non-finite validation loss", epoch);
      if (score < best_score) {
        best_score = score;
        best_params = params;
        since_improvement = 0;
      } else if (++since_improvement >= cfg.patience) {
        return best_params;
      }
    }
  }
  return early_stop ? best_params : params;
}

namespace {

// Mean batch loss and gradient for rows order[start..start+count); count equal
// to the dataset size passes the unsliced data through.
using BatchEval = std::function<double(const ParamVector& params, const std::vector<long>& order,
                                       long start, long count, ParamVector* grad)>;

PosteriorEnsemble sample_psgld_core(const MlpSpec& spec, const ParamVector& init,
                                    const Dataset& train, const PriorSpec& prior,
                                    const PsgldConfig& cfg, const BatchEval& batch_eval) {
  spec.validate();
  train.validate();
  if (train.input_dim() != spec.input_dim)
    throw std::invalid_argument("sample_psgld: dataset input_dim does not match spec");
  if (init.size() != spec.param_count())
    throw std::invalid_argument("sample_psgld: init has the wrong length");
  if (cfg.n_samples < 1) throw ConfigError("sample_psgld: n_samples must be >= 1");
  if (cfg.burn_in_epochs < 0 || cfg.thin_epochs < 0)
    throw ConfigError("sample_psgld: burn_in_epochs and thin_epochs must be >= 0");

  const long n = train.n();
  SgldConfig sgld = cfg.sgld;
  sgld.n_total = n;
  const long batch = sgld.effective_batch(n);
  if (batch < 1 || batch > n) throw ConfigError("sample_psgld: batch_size out of range");

  ParamVector params = init;
  OptimizerState state = OptimizerState::zeros(params.size());
  Rng noise_rng(derive_seed(cfg.seed, 0));
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  std::vector<long> order(n);
  std::iota(order.begin(), order.end(), 0);
  long step_index = 0;
  long epoch_index = 0;

  // One epoch = floor(N/M) full minibatches (one full-data step when M = N).
  auto run_epoch = [&]() {
    if (batch == n) {
      ParamVector mean_grad;
      batch_eval(params, order, 0, n, &mean_grad);
      ParamVector lik_sum = -static_cast<double>(n) * mean_grad;
      ParamVector prior_grad = -prior.kappa * params;
      psgld_step(state, params, prior_grad, lik_sum, sgld, step_index++, noise_rng);
    } else {
      shuffle_rng.shuffle(order);
      for (long start = 0; start + batch <= n; start += batch) {
        ParamVector mean_grad;
        batch_eval(params, order, start, batch, &mean_grad);
        ParamVector lik_sum = -static_cast<double>(batch) * mean_grad;
        ParamVector prior_grad = -prior.kappa * params;
        psgld_step(state, params, prior_grad, lik_sum, sgld, step_index++, noise_rng);
      }
    }
    ++epoch_index;
    if (!params.allFinite())
      throw DivergenceError("sample_psgld: non-finite parameters", epoch_index - 1);
  };

  for (int e = 0; e < cfg.burn_in_epochs; ++e) run_epoch();

  PosteriorEnsemble ens;
  ens.spec = spec;
  ens.provenance = Provenance::kPsgld;
  ens.samples.reserve(cfg.n_samples);
  ens.samples.push_back(params);
  for (int s = 1; s < cfg.n_samples; ++s) {
    for (int e = 0; e < cfg.thin_epochs; ++e) run_epoch();
    ens.samples.push_back(params);
  }
  return ens;
}

}  // namespace

PosteriorEnsemble sample_psgld(const MlpSpec& spec, const ParamVector& init, const Dataset& train,
                               const Matrix& aleatoric_var, const PriorSpec& prior,
                               const PsgldConfig& cfg) {
  check_var_rows(aleatoric_var, train.n(), "sample_psgld");
  const long n = train.n();
  BatchEval eval = [&](const ParamVector& params, const std::vector<long>& order, long start,
                       long count, ParamVector* grad) {
    if (count == n) {
      FixedVarNllObjective obj(aleatoric_var);
      return objective_value_grad(spec, params, train.x, train.y, obj, grad);
    }
    Matrix xb = take_rows(train.x, order, start, count);
    Matrix yb = take_rows(train.y, order, start, count);
    FixedVarNllObjective obj(var_rows(aleatoric_var, order, start, count));
    return objective_value_grad(spec, params, xb, yb, obj, grad);
  };
  return sample_psgld_core(spec, init, train, prior, cfg, eval);
}

PosteriorEnsemble sample_psgld(const MlpSpec& spec, const ParamVector& init, const Dataset& train,
                               const Objective& objective, const PriorSpec& prior,
                               const PsgldConfig& cfg) {
  const long n = train.n();
  BatchEval eval = [&](const ParamVector& params, const std::vector<long>& order, long start,
                       long count, ParamVector* grad) {
    if (count == n)
      return objective_value_grad(spec, params, train.x, train.y, objective, grad);
    Matrix xb = take_rows(train.x, order, start, count);
    Matrix yb = take_rows(train.y, order, start, count);
    return objective_value_grad(spec, params, xb, yb, objective, grad);
  };
  return sample_psgld_core(spec, init, train, prior, cfg, eval);
}

ParamVector VariationalParams::sigma() const {
  ParamVector s(rho.size());
  for (Eigen::Index i = 0; i < rho.size(); ++i) s[i] = softplus(rho[i]);
  return s;
}

void VariationalParams::validate() const {
  if (mu.size() != rho.size() || mu.size() == 0)
    throw std::invalid_argument("VariationalParams: mu and rho must match and be non-empty");
}

double kl_to_prior(const VariationalParams& q, double kappa) {
  q.validate();
  if (kappa <= 0.0) throw std::invalid_argument("kl_to_prior: kappa must be positive");
  double kl = 0.0;
  for (Eigen::Index i = 0; i < q.mu.size(); ++i) {
    double s = softplus(q.rho[i]);
    kl += 0.5 * (kappa * (s * s + q.mu[i] * q.mu[i]) - 1.0) - std::log(s) -
          0.5 * std::log(kappa);
  }
  return kl;
}

PosteriorEnsemble train_bbb(const MlpSpec& spec, const Dataset& train, const Matrix& aleatoric_var,
                            const PriorSpec& prior, const BbbConfig& cfg,
                            VariationalParams* fitted, const ParamVector* mu_init) {
  spec.validate();
  train.validate();
  if (train.input_dim() != spec.input_dim)
    throw std::invalid_argument("train_bbb: dataset input_dim does not match spec");
  check_var_rows(aleatoric_var, train.n(), "train_bbb");
  if (prior.kappa <= 0.0) throw ConfigError("train_bbb: prior kappa must be positive");
  if (cfg.n_samples < 1) throw ConfigError("train_bbb: n_samples must be >= 1");
  if (cfg.sigma_init <= 0.0) throw ConfigError("train_bbb: sigma_init must be positive");
  if (cfg.likelihood_weight < 0.0) throw ConfigError("train_bbb: likelihood_weight must be >= 0");

  const long n = train.n();
  const auto n_params = static_cast<Eigen::Index>(spec.param_count());
  const long batch = cfg.batch_size > 0 ? std::min<long>(cfg.batch_size, n) : n;

  VariationalParams q;
  if (mu_init != nullptr) {
    if (mu_init->size() != n_params)
      throw std::invalid_argument("train_bbb: mu_init has the wrong length");
    q.mu = *mu_init;
  } else {
    q.mu = init_params(spec, derive_seed(cfg.seed, 2));
  }
  q.rho = ParamVector::Constant(n_params, softplus_inverse(cfg.sigma_init));

  // Adam runs on mu and rho stacked into one vector.
  ParamVector stacked(2 * n_params);
  stacked.head(n_params) = q.mu;
  stacked.tail(n_params) = q.rho;
  OptimizerState state = OptimizerState::zeros(stacked.size());
  Rng eps_rng(derive_seed(cfg.seed, 0));
  Rng shuffle_rng(derive_seed(cfg.seed, 1));
  std::vector<long> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (batch < n) shuffle_rng.shuffle(order);
    double last_loss = 0.0;
    for (long start = 0; start < n; start += batch) {
      long count = std::min(batch, n - start);
      ParamVector mu = stacked.head(n_params);
      ParamVector rho = stacked.tail(n_params);
      ParamVector sig(n_params), eps(n_params);
      for (Eigen::Index i = 0; i < n_params; ++i) {
        sig[i] = softplus(rho[i]);
        eps[i] = eps_rng.normal();
      }
      ParamVector theta = mu + sig.cwiseProduct(eps);

      double nll_mean = 0.0;
      ParamVector data_grad = ParamVector::Zero(n_params);
      if (cfg.likelihood_weight > 0.0) {
        ParamVector g;
        if (count == n) {
          FixedVarNllObjective obj(aleatoric_var);
          nll_mean = objective_value_grad(spec, theta, train.x, train.y, obj, &g);
        } else {
          Matrix xb = take_rows(train.x, order, start, count);
          Matrix yb = take_rows(train.y, order, start, count);
          FixedVarNllObjective obj(var_rows(aleatoric_var, order, start, count));
          nll_mean = objective_value_grad(spec, theta, xb, yb, obj, &g);
        }
        // Minibatch estimate of the full-data term: N * mean over the batch.
        data_grad = cfg.likelihood_weight * static_cast<double>(n) * g;
      }

      VariationalParams cur{mu, rho};
      double kl = kl_to_prior(cur, prior.kappa);
      last_loss = cfg.likelihood_weight * static_cast<double>(n) * nll_mean + kl;

      ParamVector grad(2 * n_params);
      for (Eigen::Index i = 0; i < n_params; ++i) {
        double d_mu = data_grad[i] + prior.kappa * mu[i];
        double d_sigma = data_grad[i] * eps[i] + prior.kappa * sig[i] - 1.0 / sig[i];
        grad[i] = d_mu;
        grad[n_params + i] = d_sigma * sigmoid(rho[i]);
      }
      adam_step(state, stacked, grad, cfg.adam);
    }
    if (!std::isfinite(last_loss)) throw DivergenceError("train_bbb: non-finite loss", epoch);
  }

  q.mu = stacked.head(n_params);
  q.rho = stacked.tail(n_params);
  ParamVector sig = q.sigma();
  if (fitted != nullptr) *fitted = q;

  PosteriorEnsemble ens;
  ens.spec = spec;
  ens.provenance = Provenance::kBbb;
  ens.samples.reserve(cfg.n_samples);
  for (int s = 0; s < cfg.n_samples; ++s) {
    ParamVector draw(n_params);
    for (Eigen::Index i = 0; i < n_params; ++i) draw[i] = q.mu[i] + sig[i] * eps_rng.normal();
    ens.samples.push_back(std::move(draw));
  }
  return ens;
}

std::vector<Matrix> predict_mc_dropout(const MlpSpec& spec, const ParamVector& params,
                                       const Matrix& x, int n_passes, std::uint64_t seed) {
  spec.validate();
  if (spec.dropout_rate <= 0.0)
    throw ConfigError("predict_mc_dropout: spec.dropout_rate must be positive");
  if (n_passes < 1) throw ConfigError("predict_mc_dropout: n_passes must be >= 1");
  Rng rng(seed);
  std::vector<Matrix> passes;
  passes.reserve(n_passes);
  for (int p = 0; p < n_passes; ++p) {
    std::vector<Matrix> masks = make_dropout_masks(spec, static_cast<int>(x.rows()), rng);
    passes.push_back(forward(spec, params, x, &masks));
  }
  return passes;
}

PosteriorEnsemble train_ensemble(const MlpSpec& spec, const Dataset& train,
                                 const Objective& objective, const TrainConfig& base_cfg,
                                 const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw ConfigError("train_ensemble: need at least one seed");
  PosteriorEnsemble ens;
  ens.spec = spec;
  ens.provenance = Provenance::kEnsemble;
  ens.samples.reserve(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    TrainConfig cfg = base_cfg;
    cfg.seed = seeds[i];
    try {
      ens.samples.push_back(train_map(spec, train, objective, cfg));
    } catch (const DivergenceError& e) {
      throw DivergenceError(
          "train_ensemble member " + std::to_string(i) + ": " + strip_step_suffix(e.what()),
          e.step());
    }
  }
  return ens;
}

}  // namespace coopuq
