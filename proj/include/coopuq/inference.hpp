#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "coopuq/common.hpp"
#include "coopuq/data.hpp"
#include "coopuq/losses.hpp"
#include "coopuq/mlp.hpp"
#include "coopuq/optim.hpp"
#include "coopuq/rng.hpp"

namespace coopuq {

enum class Provenance { kPsgld, kMcDropout, kBbb, kEnsemble };

std::string to_string(Provenance p);

// A bag of parameter draws standing in for the posterior over one network's
// weights, plus enough bookkeeping to turn the draws into predictions.
struct PosteriorEnsemble {
  MlpSpec spec;
  std::vector<ParamVector> samples;
  Provenance provenance = Provenance::kPsgld;
  // Noise-model parameters the draws were conditioned on, when sampling ran
  // with the aleatoric model frozen.
  std::optional<ParamVector> aleatoric_params;
  // Stochastic-pass settings; meaningful only for kMcDropout, where samples
  // holds the single trained parameter vector and predictions come from
  // mc_passes dropout forwards.
  int mc_passes = 0;
  std::uint64_t mc_seed = 0;

  void validate() const;
};

// One output matrix per draw (per stochastic pass for dropout ensembles).
std::vector<Matrix> ensemble_outputs(const PosteriorEnsemble& ens, const Matrix& x);

struct TrainConfig {
  int epochs = 1000;
  long batch_size = 0;  // 0 = full batch; smaller last batch still used
  // Gaussian prior strength; adds kappa/(2N) * ||theta||^2 to the mean loss so
  // N * loss matches the negative log posterior. 0 turns the prior off.
  double kappa = 0.0;
  // Early stopping: stop after this many epochs without a validation
  // improvement and return the best parameters seen. 0 disables; requires a
  // validation set when set.
  int patience = 0;
  std::uint64_t seed = 0;
  AdamConfig adam;
};

// Adam-minimizes the objective from a fresh init (or from *init when given).
// A spec with dropout_rate > 0 trains under fresh per-step masks. The
// validation score, when val is given, is the bare objective without the
// prior term and without dropout. Throws DivergenceError with the epoch on
// non-finite loss.
ParamVector train_map(const MlpSpec& spec, const Dataset& train, const Objective& objective,
                      const TrainConfig& cfg, const Dataset* val = nullptr,
                      const ParamVector* init = nullptr);

struct PsgldConfig {
  SgldConfig sgld;         // n_total is overwritten with the dataset size
  int burn_in_epochs = 1000;
  int thin_epochs = 10;    // epochs between collected draws; 0 collects back to back
  int n_samples = 100;
  std::uint64_t seed = 0;  // injected noise + minibatch shuffling
};

// Preconditioned Langevin sampling of the weight posterior with the aleatoric
// variance held fixed. Starts exactly at init (warm start), runs
// burn_in_epochs, then collects n_samples draws thin_epochs apart. With
// minibatches each epoch shuffles and visits floor(N/M) full batches.
// aleatoric_var broadcasts like the losses: 1 x 1, N x 1, or N x m.
PosteriorEnsemble sample_psgld(const MlpSpec& spec, const ParamVector& init,
                               const Dataset& train, const Matrix& aleatoric_var,
                               const PriorSpec& prior, const PsgldConfig& cfg);

// Same chain with the per-point negative log-likelihood supplied directly,
// for networks that model their own noise (for instance a variance head).
// The objective must treat every row identically so minibatch slices mean
// the same thing as the full data.
PosteriorEnsemble sample_psgld(const MlpSpec& spec, const ParamVector& init,
                               const Dataset& train, const Objective& objective,
                               const PriorSpec& prior, const PsgldConfig& cfg);

// Mean-field Gaussian over the weights, sigma = softplus(rho) per coordinate.
struct VariationalParams {
  ParamVector mu;
  ParamVector rho;

  ParamVector sigma() const;
  void validate() const;
};

// KL( N(mu, diag sigma^2) || N(0, I/kappa) ), summed over coordinates.
double kl_to_prior(const VariationalParams& q, double kappa);

struct BbbConfig {
  int epochs = 2000;
  long batch_size = 0;
  int n_samples = 100;  // draws returned from the fitted q
  // Scales the data term of the ELBO; 0 leaves only the KL, pulling q onto
  // the prior. 1 is the standard ELBO.
  double likelihood_weight = 1.0;
  double sigma_init = 0.05;  // initial posterior std
  std::uint64_t seed = 0;
  AdamConfig adam;
};

// Stochastic variational inference with one reparameterized draw per step and
// the Gaussian KL in closed form. Returns n_samples draws from the fitted q;
// *fitted receives the variational parameters when non-null. mu_init, when
// given, seeds the variational mean (warm start); otherwise a fresh network
// init is used.
PosteriorEnsemble train_bbb(const MlpSpec& spec, const Dataset& train,
                            const Matrix& aleatoric_var, const PriorSpec& prior,
                            const BbbConfig& cfg, VariationalParams* fitted = nullptr,
                            const ParamVector* mu_init = nullptr);

// n_passes stochastic forwards with dropout active. Requires
// spec.dropout_rate > 0 (ConfigError otherwise).
std::vector<Matrix> predict_mc_dropout(const MlpSpec& spec, const ParamVector& params,
                                       const Matrix& x, int n_passes, std::uint64_t seed);

// Independent trainings from the given seeds, aggregated downstream as a
// uniform mixture. A diverging member fails the call with the member index in
// the message.
PosteriorEnsemble train_ensemble(const MlpSpec& spec, const Dataset& train,
                                 const Objective& objective, const TrainConfig& base_cfg,
                                 const std::vector<std::uint64_t>& seeds);

}  // namespace coopuq
