#include "coopuq/metrics.hpp"

#include <cmath>
#include <algorithm>
#include <stdexcept>
#include <vector>

#include "coopuq/coop.hpp"

namespace coopuq {

namespace {

constexpr double kPi = 3.14159265358979323846;

void require_aligned(const Predictions& p, const Matrix& targets, const char* who) {
  p.validate();
  if (targets.rows() != p.n() || targets.cols() != p.dims())
    throw std::invalid_argument(std::string(who) + ": predictions and targets disagree in shape");
}

// Mean over draws of the mean head, and the population variance around it.
// Aleatoric columns are filled by the caller.
Predictions moments_over_draws(const PosteriorEnsemble& ensemble, const Matrix& x,
                               const std::vector<Matrix>& outputs) {
  const HeadSpec& head = ensemble.spec.heads[ensemble.spec.head_index("mean")];
  Predictions p;
  p.mean = Matrix::Zero(x.rows(), head.dim);
  for (const Matrix& out : outputs) p.mean += head_block(ensemble.spec, out, "mean");
  p.mean /= static_cast<double>(outputs.size());
  p.epistemic_var = Matrix::Zero(x.rows(), head.dim);
  for (const Matrix& out : outputs) {
    Matrix d = head_block(ensemble.spec, out, "mean") - p.mean;
    p.epistemic_var += d.cwiseProduct(d);
  }
  p.epistemic_var /= static_cast<double>(outputs.size());
  return p;
}

}  // namespace

void Predictions::validate() const {
  if (aleatoric_var.rows() != mean.rows() || aleatoric_var.cols() != mean.cols() ||
      epistemic_var.rows() != mean.rows() || epistemic_var.cols() != mean.cols())
    throw std::invalid_argument("Predictions: mean and variance blocks disagree in shape");
  if (!mean.allFinite() || !aleatoric_var.allFinite() || !epistemic_var.allFinite())
    throw std::invalid_argument("Predictions: non-finite entries");
  if ((aleatoric_var.array() < 0.0).any() || (epistemic_var.array() < 0.0).any())
    throw std::invalid_argument("Predictions: negative variance");
}

Predictions posterior_predictive(const PosteriorEnsemble& ensemble, const MlpSpec& var_spec,
                                 const ParamVector& phi, const Matrix& x) {
  ensemble.validate();
  Predictions p = moments_over_draws(ensemble, x, ensemble_outputs(ensemble, x));
  p.aleatoric_var = aleatoric_variance(var_spec, phi, x);
  p.validate();
  return p;
}

Predictions posterior_predictive(const PosteriorEnsemble& ensemble, double fixed_aleatoric_var,
                                 const Matrix& x) {
  if (!(fixed_aleatoric_var >= 0.0))
    throw std::invalid_argument("posterior_predictive: fixed aleatoric variance must be >= 0");
  ensemble.validate();
  Predictions p = moments_over_draws(ensemble, x, ensemble_outputs(ensemble, x));
  p.aleatoric_var = Matrix::Constant(p.mean.rows(), p.mean.cols(), fixed_aleatoric_var);
  p.validate();
  return p;
}

Predictions posterior_predictive(const PosteriorEnsemble& ensemble, const Matrix& x) {
  ensemble.validate();
  std::vector<Matrix> outputs = ensemble_outputs(ensemble, x);
  Predictions p = moments_over_draws(ensemble, x, outputs);
  p.aleatoric_var = Matrix::Zero(p.mean.rows(), p.mean.cols());
  for (const Matrix& out : outputs) p.aleatoric_var += head_block(ensemble.spec, out, "var");
  p.aleatoric_var /= static_cast<double>(outputs.size());
  p.validate();
  return p;
}

Predictions unscale_predictions(const Scaler& s, const Predictions& p) {
  p.validate();
  Predictions out;
  out.mean = unscale_mean(s, p.mean);
  out.aleatoric_var = unscale_variance(s, p.aleatoric_var);
  out.epistemic_var = unscale_variance(s, p.epistemic_var);
  return out;
}

double rmse(const Predictions& p, const Matrix& targets) {
  require_aligned(p, targets, "rmse");
  double acc = (p.mean - targets).array().square().rowwise().sum().mean();
  return std::sqrt(acc);
}

double mae(const Predictions& p, const Matrix& targets) {
  require_aligned(p, targets, "mae");
  return (p.mean - targets).array().abs().mean();
}

double tll(const Predictions& p, const Matrix& targets, TllVariance which) {
  require_aligned(p, targets, "tll");
  const Matrix var = which == TllVariance::kTotal ? p.total_var() : p.epistemic_var;
  if ((var.array() <= 0.0).any())
    throw std::invalid_argument("tll: requires strictly positive variance at every point");
  Matrix d = targets - p.mean;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < var.rows(); ++i)
    for (Eigen::Index j = 0; j < var.cols(); ++j)
      acc += -0.5 * std::log(2.0 * kPi * var(i, j)) - d(i, j) * d(i, j) / (2.0 * var(i, j));
  return acc / static_cast<double>(var.rows());
}

double wasserstein(const Predictions& p, const Matrix& truth_mean, const Matrix& truth_noise_var,
                   bool std_mode) {
  require_aligned(p, truth_mean, "wasserstein");
  if (truth_noise_var.rows() != p.n() || truth_noise_var.cols() != p.dims())
    throw std::invalid_argument("wasserstein: ground-truth variance disagrees in shape");
  if ((truth_noise_var.array() < 0.0).any())
    throw std::invalid_argument("wasserstein: negative ground-truth variance");
  Matrix dm = truth_mean - p.mean;
  Matrix dv;
  if (std_mode)
    dv = truth_noise_var.array().sqrt().matrix() - p.aleatoric_var.array().sqrt().matrix();
  else
    dv = truth_noise_var - p.aleatoric_var;
  double acc = 0.0;
  for (Eigen::Index i = 0; i < dm.rows(); ++i)
    acc += std::sqrt(dm.row(i).squaredNorm() + dv.row(i).squaredNorm());
  return acc / static_cast<double>(dm.rows());
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("normal_quantile: p must lie strictly in (0,1)");
  // Rational approximation (Acklam), polished with one Halley step against
  // the erfc-based CDF; accurate to near machine precision.
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                             3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  double err = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  double u = err * std::sqrt(2.0 * kPi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

ConformalCalibration conformal_calibrate(const Predictions& val, const Matrix& val_targets,
                                         double alpha) {
  require_aligned(val, val_targets, "conformal_calibrate");
  if (val.dims() != 1)
    throw std::invalid_argument("conformal_calibrate: scalar targets only");
  if (val.n() == 0) throw std::invalid_argument("conformal_calibrate: empty validation set");
  if (!(alpha > 0.0 && alpha < 1.0))
    throw std::invalid_argument("conformal_calibrate: alpha must lie strictly in (0,1)");
  const double z = normal_quantile(1.0 - 0.5 * alpha);
  const Matrix total = val.total_var();
  std::vector<double> scores(static_cast<std::size_t>(val.n()));
  for (Eigen::Index i = 0; i < val.n(); ++i) {
    double half = z * std::sqrt(total(i, 0));
    double lo = val.mean(i, 0) - half;
    double hi = val.mean(i, 0) + half;
    scores[static_cast<std::size_t>(i)] =
        std::max(lo - val_targets(i, 0), val_targets(i, 0) - hi);
  }
  const auto n = static_cast<double>(scores.size());
  const auto k = static_cast<std::size_t>(std::ceil((n + 1.0) * (1.0 - alpha)));
  if (k > scores.size())
    throw std::invalid_argument(
        "conformal_calibrate: validation set too small for the requested alpha");
  std::nth_element(scores.begin(), scores.begin() + (k - 1), scores.end());
  return ConformalCalibration{alpha, scores[k - 1]};
}

CoverageReport conformal_coverage(const ConformalCalibration& cal, const Predictions& test,
                                  const Matrix& test_targets) {
  require_aligned(test, test_targets, "conformal_coverage");
  if (test.dims() != 1)
    throw std::invalid_argument("conformal_coverage: scalar targets only");
  if (!std::isfinite(cal.q_hat))
    throw std::invalid_argument("conformal_coverage: calibration is not finite");
  const double z = normal_quantile(1.0 - 0.5 * cal.alpha);
  const Matrix total = test.total_var();
  double inside = 0.0;
  double length = 0.0;
  for (Eigen::Index i = 0; i < test.n(); ++i) {
    double half = z * std::sqrt(total(i, 0));
    double lo = test.mean(i, 0) - half - cal.q_hat;
    double hi = test.mean(i, 0) + half + cal.q_hat;
    if (lo <= test_targets(i, 0) && test_targets(i, 0) <= hi) inside += 1.0;
    length += hi - lo;
  }
  const auto n = static_cast<double>(test.n());
  return CoverageReport{n > 0.0 ? inside / n : 0.0, n > 0.0 ? length / n : 0.0};
}

}  // namespace coopuq
