#include "coopuq/losses.hpp"

#include <cmath>

#include "coopuq/special.hpp"

namespace coopuq {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

double var_entry(const Matrix& var, Eigen::Index n, Eigen::Index d) {
  if (var.rows() == 1 && var.cols() == 1) return var(0, 0);
  if (var.cols() == 1) return var(n, 0);
  return var(n, d);
}

void check_var_shape(const Matrix& var, Eigen::Index n, Eigen::Index m, const char* who) {
  bool ok = (var.rows() == 1 && var.cols() == 1) || (var.rows() == n && var.cols() == 1) ||
            (var.rows() == n && var.cols() == m);
  if (!ok) throw std::invalid_argument(std::string(who) + ": variance shape mismatch");
  if ((var.array() <= 0.0).any())
    throw std::invalid_argument(std::string(who) + ": variance must be positive");
}

}  // namespace

double gaussian_nll(double mean, double var, double y) {
  if (!(var > 0.0)) throw std::invalid_argument("gaussian_nll: var must be positive");
  double d = y - mean;
  return d * d / (2.0 * var) + 0.5 * std::log(var);
}

GaussianNllGrad gaussian_nll_grad(double mean, double var, double y) {
  if (!(var > 0.0)) throw std::invalid_argument("gaussian_nll: var must be positive");
  double d = mean - y;
  GaussianNllGrad g;
  g.d_mean = d / var;
  g.d_var = (var - d * d) / (2.0 * var * var);
  return g;
}

double beta_nll(double mean, double var, double y, double beta) {
  if (!(var > 0.0)) throw std::invalid_argument("beta_nll: var must be positive");
  double w = std::pow(var, beta);
  return w * gaussian_nll(mean, var, y);
}

GaussianNllGrad beta_nll_grad(double mean, double var, double y, double beta) {
  // The var^beta weight is a detached constant: differentiate only the NLL.
  double w = std::pow(var, beta);
  GaussianNllGrad g = gaussian_nll_grad(mean, var, y);
  g.d_mean *= w;
  g.d_var *= w;
  return g;
}

double gamma_nll(const GammaParams& g, double r) {
  if (!(g.shape > 0.0) || !(g.rate > 0.0))
    throw std::invalid_argument("gamma_nll: shape and rate must be positive");
  if (!(r > 0.0)) throw std::invalid_argument("gamma_nll: r must be positive");
  return -g.shape * std::log(g.rate) + std::lgamma(g.shape) - (g.shape - 1.0) * std::log(r) +
         g.rate * r;
}

GammaNllGrad gamma_nll_grad(const GammaParams& g, double r) {
  if (!(g.shape > 0.0) || !(g.rate > 0.0))
    throw std::invalid_argument("gamma_nll: shape and rate must be positive");
  if (!(r > 0.0)) throw std::invalid_argument("gamma_nll: r must be positive");
  GammaNllGrad out;
  out.d_shape = -std::log(g.rate) + digamma(g.shape) - std::log(r);
  out.d_rate = -g.shape / g.rate + r;
  return out;
}

double mse(const Matrix& mean, const Matrix& y) {
  if (mean.rows() != y.rows() || mean.cols() != y.cols())
    throw std::invalid_argument("mse: shape mismatch");
  if (mean.rows() == 0) throw std::invalid_argument("mse: empty batch");
  return (mean - y).array().square().sum() / static_cast<double>(mean.rows());
}

double log_posterior(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
                     const Matrix& y, const Matrix& aleatoric_var, const PriorSpec& prior) {
  if (!(prior.kappa > 0.0)) throw std::invalid_argument("log_posterior: kappa must be positive");
  if (x.rows() != y.rows()) throw std::invalid_argument("log_posterior: x/y row mismatch");
  check_var_shape(aleatoric_var, x.rows(), y.cols(), "log_posterior");
  Matrix mu = head_block(spec, forward(spec, params, x), "mean");
  if (mu.cols() != y.cols()) throw std::invalid_argument("log_posterior: target dim mismatch");
  double lik = 0.0;
  for (Eigen::Index n = 0; n < y.rows(); ++n)
    for (Eigen::Index d = 0; d < y.cols(); ++d) {
      double v = var_entry(aleatoric_var, n, d);
      double r = y(n, d) - mu(n, d);
      lik += -0.5 * (kLog2Pi + std::log(v)) - r * r / (2.0 * v);
    }
  double m = static_cast<double>(params.size());
  double log_prior = m * 0.5 * std::log(prior.kappa / (2.0 * M_PI)) -
                     0.5 * prior.kappa * params.squaredNorm();
  return lik + log_prior;
}

ParamVector log_posterior_grad(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
                               const Matrix& y, const Matrix& aleatoric_var,
                               const PriorSpec& prior) {
  check_var_shape(aleatoric_var, x.rows(), y.cols(), "log_posterior_grad");
  FixedVarNllObjective nll(aleatoric_var);
  ParamVector g;
  objective_value_grad(spec, params, x, y, nll, &g);
  // objective is mean-reduced; Eq. 8 sums over points
  g *= -static_cast<double>(x.rows());
  g -= prior.kappa * params;
  return g;
}

double MseObjective::evaluate(const MlpSpec& spec, const Matrix& outputs, const Matrix& targets,
                              Matrix* grad) const {
  Matrix mu = head_block(spec, outputs, "mean");
  if (mu.cols() != targets.cols() || mu.rows() != targets.rows())
    throw std::invalid_argument("MseObjective: target shape mismatch");
  double n = static_cast<double>(targets.rows());
  if (grad != nullptr) {
    grad->setZero(outputs.rows(), outputs.cols());
    int c0 = spec.head_offset(spec.head_index("mean"));
    grad->middleCols(c0, mu.cols()) = 2.0 / n * (mu - targets);
  }
  return (mu - targets).array().square().sum() / n;
}

double FixedVarNllObjective::evaluate(const MlpSpec& spec, const Matrix& outputs,
                                      const Matrix& targets, Matrix* grad) const {
  Matrix mu = head_block(spec, outputs, "mean");
  if (mu.cols() != targets.cols() || mu.rows() != targets.rows())
    throw std::invalid_argument("FixedVarNllObjective: target shape mismatch");
  check_var_shape(var_, targets.rows(), targets.cols(), "FixedVarNllObjective");
  double n = static_cast<double>(targets.rows());
  if (grad != nullptr) grad->setZero(outputs.rows(), outputs.cols());
  int c0 = spec.head_offset(spec.head_index("mean"));
  double total = 0.0;
  for (Eigen::Index r = 0; r < targets.rows(); ++r)
    for (Eigen::Index d = 0; d < targets.cols(); ++d) {
      double v = var_entry(var_, r, d);
      total += gaussian_nll(mu(r, d), v, targets(r, d));
      if (grad != nullptr) (*grad)(r, c0 + d) = (mu(r, d) - targets(r, d)) / v / n;
    }
  return total / n;
}

double BetaNllObjective::evaluate(const MlpSpec& spec, const Matrix& outputs,
                                  const Matrix& targets, Matrix* grad) const {
  Matrix mu = head_block(spec, outputs, "mean");
  Matrix var = head_block(spec, outputs, "var");
  if (mu.cols() != targets.cols() || var.cols() != targets.cols() || mu.rows() != targets.rows())
    throw std::invalid_argument("BetaNllObjective: target shape mismatch");
  double n = static_cast<double>(targets.rows());
  if (grad != nullptr) grad->setZero(outputs.rows(), outputs.cols());
  int cm = spec.head_offset(spec.head_index("mean"));
  int cv = spec.head_offset(spec.head_index("var"));
  double total = 0.0;
  for (Eigen::Index r = 0; r < targets.rows(); ++r)
    for (Eigen::Index d = 0; d < targets.cols(); ++d) {
      total += beta_nll(mu(r, d), var(r, d), targets(r, d), beta_);
      if (grad != nullptr) {
        GaussianNllGrad g = beta_nll_grad(mu(r, d), var(r, d), targets(r, d), beta_);
        (*grad)(r, cm + d) = g.d_mean / n;
        (*grad)(r, cv + d) = g.d_var / n;
      }
    }
  return total / n;
}

double GammaNllObjective::evaluate(const MlpSpec& spec, const Matrix& outputs,
                                   const Matrix& targets, Matrix* grad) const {
  Matrix shape = head_block(spec, outputs, "alpha");
  Matrix rate = head_block(spec, outputs, "lambda");
  if (shape.cols() != targets.cols() || rate.cols() != targets.cols() ||
      shape.rows() != targets.rows())
    throw std::invalid_argument("GammaNllObjective: target shape mismatch");
  double n = static_cast<double>(targets.rows());
  if (grad != nullptr) grad->setZero(outputs.rows(), outputs.cols());
  int cs = spec.head_offset(spec.head_index("alpha"));
  int cr = spec.head_offset(spec.head_index("lambda"));
  double total = 0.0;
  for (Eigen::Index r = 0; r < targets.rows(); ++r)
    for (Eigen::Index d = 0; d < targets.cols(); ++d) {
      double res = std::max(targets(r, d), kResidualFloor);
      GammaParams g{shape(r, d), rate(r, d)};
      total += gamma_nll(g, res);
      if (grad != nullptr) {
        GammaNllGrad gg = gamma_nll_grad(g, res);
        (*grad)(r, cs + d) = gg.d_shape / n;
        (*grad)(r, cr + d) = gg.d_rate / n;
      }
    }
  return total / n;
}

double objective_value_grad(const MlpSpec& spec, const ParamVector& params, const Matrix& x,
                            const Matrix& targets, const Objective& obj, ParamVector* grad,
                            const std::vector<Matrix>* masks) {
  ForwardTrace tr = forward_trace(spec, params, x, masks);
  if (grad == nullptr) return obj.evaluate(spec, tr.outputs, targets, nullptr);
  Matrix d_out;
  double value = obj.evaluate(spec, tr.outputs, targets, &d_out);
  *grad = backward(spec, params, tr, d_out);
  return value;
}

}  // namespace coopuq
