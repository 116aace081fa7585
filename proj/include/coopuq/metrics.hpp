#pragma once

#include "coopuq/data.hpp"
#include "coopuq/inference.hpp"

namespace coopuq {

// Per-point Gaussian predictive summaries over an evaluation set, one column
// per output dimension. The predictive distribution at a point is
// N(mean, aleatoric_var + epistemic_var).
struct Predictions {
  Matrix mean;
  Matrix aleatoric_var;
  Matrix epistemic_var;

  Eigen::Index n() const { return mean.rows(); }
  Eigen::Index dims() const { return mean.cols(); }
  Matrix total_var() const { return aleatoric_var + epistemic_var; }
  void validate() const;
};

// Assemble the predictive summary from posterior draws. The mean is the
// sample average of per-draw mean-head outputs and the epistemic variance is
// the population variance over draws. The overloads differ only in where the
// aleatoric part comes from:
//   - a fitted noise network phi evaluated at x,
//   - a fixed (possibly zero) variance shared by every point,
//   - each member's own "var" head, averaged across members.
Predictions posterior_predictive(const PosteriorEnsemble& ensemble, const MlpSpec& var_spec,
                                 const ParamVector& phi, const Matrix& x);
Predictions posterior_predictive(const PosteriorEnsemble& ensemble, double fixed_aleatoric_var,
                                 const Matrix& x);
Predictions posterior_predictive(const PosteriorEnsemble& ensemble, const Matrix& x);

// Map standardized-space predictions back to the original data scale.
Predictions unscale_predictions(const Scaler& s, const Predictions& p);

// Root mean squared error; per-point squared errors are summed over output
// dimensions before averaging.
double rmse(const Predictions& p, const Matrix& targets);

// Mean absolute error, averaged over points and output dimensions.
double mae(const Predictions& p, const Matrix& targets);

// Which variance enters the log-likelihood.
enum class TllVariance { kTotal, kEpistemic };

// Test log-likelihood: mean over points of the Gaussian log-density of the
// target under the predictive distribution, constants included. Dimensions
// are treated as independent and their log-densities summed. Throws if the
// chosen variance is zero anywhere.
double tll(const Predictions& p, const Matrix& targets, TllVariance which = TllVariance::kTotal);

// Distance between the predicted aleatoric law and the known ground truth,
// averaged over points:
//   sqrt(|truth_mean - mean|^2 + |truth_var - aleatoric_var|^2)
// with squared differences of variances. std_mode replaces the second term
// with squared differences of standard deviations for comparison.
double wasserstein(const Predictions& p, const Matrix& truth_mean, const Matrix& truth_noise_var,
                   bool std_mode = false);

// Quantile function of the standard normal. p must lie strictly in (0,1).
double normal_quantile(double p);

struct ConformalCalibration {
  double alpha = 0.1;
  double q_hat = 0.0;
};

struct CoverageReport {
  double coverage = 0.0;
  double mean_interval_length = 0.0;
};

// Split-conformal calibration for scalar targets. Each validation point gets
// the central (1-alpha) interval mean +- z_{1-alpha/2} sqrt(total_var); the
// conformity score is how far the target sits outside it (negative when
// inside). q_hat is the k-th smallest score with k = ceil((n+1)(1-alpha)),
// the finite-sample corrected quantile; throws when the validation set is
// too small for that order statistic to exist.
ConformalCalibration conformal_calibrate(const Predictions& val, const Matrix& val_targets,
                                         double alpha);

// Fraction of test targets inside the q_hat-widened intervals, plus the mean
// widened interval length (negative q_hat can shrink intervals; the length
// is reported as is).
CoverageReport conformal_coverage(const ConformalCalibration& cal, const Predictions& test,
                                  const Matrix& test_targets);

}  // namespace coopuq
