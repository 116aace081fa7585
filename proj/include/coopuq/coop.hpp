#pragma once

#include <cstdint>
#include <vector>

#include "coopuq/common.hpp"
#include "coopuq/data.hpp"
#include "coopuq/inference.hpp"
#include "coopuq/losses.hpp"
#include "coopuq/mlp.hpp"

namespace coopuq {

// Cooperative training alternates three roles: a mean network fit once up
// front, a variance network fit to squared residuals through a Gamma
// likelihood, and a weight posterior over the mean network sampled with the
// noise model frozen. Each round re-estimates the noise from the current
// posterior-mean predictions and keeps the round whose log marginal
// likelihood is best.

// How each round turns the trained mean network into a weight posterior.
enum class CoopInference { kPsgld, kMcDropout, kBbb };

struct CoopConfig {
  int iterations = 2;  // K, upper bound on rounds
  MlpSpec mean_spec;
  MlpSpec var_spec;  // heads must be exactly {alpha, lambda}, both softplus
  TrainConfig mean_cfg;
  TrainConfig var_cfg;  // patience > 0 early-stops on an internal 80/20 residual split
  PsgldConfig bnn_cfg;  // used by kPsgld
  BbbConfig bbb_cfg;    // used by kBbb; the variational mean warm-starts each round
  PriorSpec prior;
  // Constant variance of the initial mean fit's Gaussian NLL.
  double initial_variance = 1.0;
  CoopInference inference = CoopInference::kPsgld;
  int mc_passes = 100;  // stochastic forwards per prediction for kMcDropout

  void validate(Eigen::Index output_dim) const;
};

struct CoopIteration {
  PosteriorEnsemble ensemble;  // weight draws of this round
  ParamVector var_params;      // noise-model parameters the draws were conditioned on
  Matrix aleatoric_train;      // alpha/lambda on the training inputs, as used by the sampler
  double lmglk = 0.0;          // log marginal likelihood on the training set
};

struct CoopResult {
  ParamVector map_params;  // the initial deterministic mean fit
  std::vector<CoopIteration> iterations;
  int selected = 0;  // 0-based round index with the best lmglk

  const CoopIteration& best() const { return iterations.at(selected); }
};

// alpha/lambda of the fitted Gamma noise model, i.e. the aleatoric variance,
// evaluated per input row.
Matrix aleatoric_variance(const MlpSpec& var_spec, const ParamVector& phi, const Matrix& x);

// Fits the Gamma noise model to squared residuals (floored at
// kResidualFloor). cfg.patience > 0 carves a 20% holdout off the residuals
// for early stopping (skipped when the dataset is too small to split).
// Throws when every residual sits below the floor, since the Gamma fit is
// then unconstrained.
ParamVector train_variance_net(const MlpSpec& var_spec, const Dataset& ds,
                               const Matrix& mean_predictions, const TrainConfig& cfg);

// log E_posterior[ p(data | theta, phi) ] over the ensemble's draws:
// log-mean-exp (max-shifted) of each draw's full-data Gaussian log-likelihood
// with per-point variance alpha/lambda.
double log_marginal_likelihood(const PosteriorEnsemble& ensemble, const MlpSpec& var_spec,
                               const ParamVector& phi, const Dataset& ds);

// Index of the largest value; earliest wins ties. Throws on empty input.
int select_best(const std::vector<double>& lmglk);

CoopResult coop_train(const Dataset& train, const CoopConfig& cfg);

}  // namespace coopuq
