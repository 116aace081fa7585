#pragma once

#include <memory>
#include <string>

#include "coopuq/common.hpp"
#include "coopuq/mlp.hpp"

namespace coopuq {

// Floor applied to squared residuals before they enter a log.
inline constexpr double kResidualFloor = 1e-8;

struct GammaParams {
  double shape = 1.0;  // alpha
  double rate = 1.0;   // lambda
};

struct PriorSpec {
  double kappa = 1.0;  // precision of the zero-mean Gaussian prior
};

// Per-point losses. The *_grad variants return analytic partials; every one
// of them is checked against central finite differences in the tests.

// (y-mean)^2/(2 var) + log(var)/2. The 2*pi constant is dropped.
double gaussian_nll(double mean, double var, double y);
struct GaussianNllGrad {
  double d_mean = 0.0;
  double d_var = 0.0;
};
GaussianNllGrad gaussian_nll_grad(double mean, double var, double y);

// Gaussian NLL weighted per point by var^beta, with the weight treated as a
// constant when differentiating. beta=0 is gaussian_nll exactly; beta=1 makes
// the mean gradient (mean-y).
double beta_nll(double mean, double var, double y, double beta);
GaussianNllGrad beta_nll_grad(double mean, double var, double y, double beta);

// Negative log-density of Gamma(shape, rate) at r:
//   -shape*log(rate) + lgamma(shape) - (shape-1)*log(r) + rate*r.
double gamma_nll(const GammaParams& g, double r);
struct GammaNllGrad {
  double d_shape = 0.0;
  double d_rate = 0.0;
};
GammaNllGrad gamma_nll_grad(const GammaParams& g, double r);

// Mean over rows of the squared error summed across output columns.
double mse(const Matrix& mean, const Matrix& y);

// Log posterior of network weights under a Gaussian observation model with
// fixed per-point aleatoric variance and a zero-mean Gaussian prior:
//   sum_n [ -log(2 pi v_n)/2 - (y_n - mu_n)^2/(2 v_n) ]
//     + m*log(sqrt(kappa/(2 pi))) - (kappa/2)*||params||^2.
// aleatoric_var may be N x m, N x 1 (shared across outputs), or 1 x 1.
double log_posterior(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
                     const Matrix& y, const Matrix& aleatoric_var, const PriorSpec& prior);
ParamVector log_posterior_grad(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
                               const Matrix& y, const Matrix& aleatoric_var,
                               const PriorSpec& prior);

// A training objective evaluated on network head outputs. Returns the
// mean-over-rows loss and, when grad is non-null, the loss gradient w.r.t.
// the post-link outputs (same shape as outputs).
class Objective {
 public:
  virtual ~Objective() = default;
  virtual double evaluate(const MlpSpec& spec, const Matrix& outputs, const Matrix& targets,
                          Matrix* grad) const = 0;
};

// Squared error on the "mean" head.
class MseObjective : public Objective {
 public:
  double evaluate(const MlpSpec& spec, const Matrix& outputs, const Matrix& targets,
                  Matrix* grad) const override;
};

// Gaussian NLL on the "mean" head with a fixed variance (scalar, N x 1, or
// N x m matrix).
class FixedVarNllObjective : public Objective {
 public:
  explicit FixedVarNllObjective(Matrix var) : var_(std::move(var)) {}
  explicit FixedVarNllObjective(double var) : var_(Matrix::Constant(1, 1, var)) {}
  double evaluate(const MlpSpec& spec, const Matrix& outputs, const Matrix& targets,
                  Matrix* grad) const override;

 private:
  Matrix var_;
};

// beta-NLL on "mean" and "var" heads; beta=0 gives the plain heteroscedastic
// Gaussian NLL.
class BetaNllObjective : public Objective {
 public:
  explicit BetaNllObjective(double beta) : beta_(beta) {}
  double evaluate(const MlpSpec& spec, const Matrix& outputs, const Matrix& targets,
                  Matrix* grad) const override;

 private:
  double beta_;
};

// Gamma NLL on "alpha" (shape) and "lambda" (rate) heads; targets are squared
// residuals, floored at kResidualFloor.
class GammaNllObjective : public Objective {
 public:
  double evaluate(const MlpSpec& spec, const Matrix& outputs, const Matrix& targets,
                  Matrix* grad) const override;
};

// Forward + objective + reverse sweep in one call. Returns the objective
// value; writes the parameter gradient when grad is non-null.
double objective_value_grad(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
                            const Matrix& targets, const Objective& obj, ParamVector* grad,
                            const std::vector<Matrix>* masks = nullptr);

}  // namespace coopuq
