#include <cmath>
#include <algorithm>
#include <array>
#include <limits>
#include <vector>

#include "coopuq/coop.hpp"
#include "coopuq/metrics.hpp"
#include "coopuq/rng.hpp"
#include "doctest.h"

using namespace coopuq;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Affine net: one input, no hidden layers, a single identity mean head.
// Params are [w, b], prediction w*x + b.
MlpSpec affine_mean() {
  MlpSpec s;
  s.input_dim = 1;
  s.heads = {{"mean", 1, Link::kIdentity}};
  s.validate();
  return s;
}

// Affine two-head net: outputs [mean, var] with params
// [w_mean, w_var, b_mean, b_var] and a softplus var head.
MlpSpec affine_mve() {
  MlpSpec s;
  s.input_dim = 1;
  s.heads = {{"mean", 1, Link::kIdentity}, {"var", 1, Link::kSoftplus}};
  s.validate();
  return s;
}

PosteriorEnsemble affine_ensemble(const std::vector<std::pair<double, double>>& wb) {
  PosteriorEnsemble ens;
  ens.spec = affine_mean();
  for (auto [w, b] : wb) ens.samples.push_back((ParamVector(2) << w, b).finished());
  return ens;
}

double softplus(double z) { return std::log1p(std::exp(z)) + 1e-6; }

Predictions constant_predictions(int n, double mean, double alea, double epi) {
  Predictions p;
  p.mean = Matrix::Constant(n, 1, mean);
  p.aleatoric_var = Matrix::Constant(n, 1, alea);
  p.epistemic_var = Matrix::Constant(n, 1, epi);
  return p;
}

}  // namespace

TEST_CASE("predictive moments come from the draws and decompose exactly") {
  Matrix x(3, 1);
  x << 0.0, 1.0, -2.0;

  PosteriorEnsemble one = affine_ensemble({{0.5, 0.1}});
  Predictions p1 = posterior_predictive(one, 0.3, x);
  CHECK(p1.epistemic_var == Matrix::Zero(3, 1));
  CHECK(p1.mean(1, 0) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(p1.aleatoric_var == Matrix::Constant(3, 1, 0.3));
  CHECK(p1.total_var() == p1.aleatoric_var + p1.epistemic_var);

  // Two draws predicting -1 and +1 everywhere: mean 0, population variance 1.
  PosteriorEnsemble two = affine_ensemble({{0.0, -1.0}, {0.0, 1.0}});
  Predictions p2 = posterior_predictive(two, 0.0, x);
  CHECK(p2.mean == Matrix::Zero(3, 1));
  CHECK(p2.epistemic_var == Matrix::Ones(3, 1));

  PosteriorEnsemble none = affine_ensemble({});
  CHECK_THROWS(posterior_predictive(none, 1.0, x));
  CHECK_THROWS(posterior_predictive(one, -0.5, x));
}

TEST_CASE("five hand-set draws match the direct arithmetic") {
  std::vector<std::pair<double, double>> wb = {
      {0.5, 0.1}, {-1.2, 0.4}, {2.0, -0.3}, {0.0, 0.9}, {0.7, 0.7}};
  PosteriorEnsemble ens = affine_ensemble(wb);
  Matrix x(4, 1);
  x << -1.5, 0.0, 0.3, 2.0;
  Predictions p = posterior_predictive(ens, 0.25, x);
  for (int i = 0; i < 4; ++i) {
    double mu = 0.0;
    for (auto [w, b] : wb) mu += w * x(i, 0) + b;
    mu /= 5.0;
    double var = 0.0;
    for (auto [w, b] : wb) var += (w * x(i, 0) + b - mu) * (w * x(i, 0) + b - mu);
    var /= 5.0;
    CHECK(p.mean(i, 0) == doctest::Approx(mu).epsilon(1e-14));
    CHECK(p.epistemic_var(i, 0) == doctest::Approx(var).epsilon(1e-13));
  }
}

TEST_CASE("the noise-network overload evaluates the fitted noise model") {
  PosteriorEnsemble ens = affine_ensemble({{1.0, 0.0}, {0.8, 0.2}});
  MlpSpec vspec;
  vspec.input_dim = 1;
  vspec.heads = {{"alpha", 1, Link::kSoftplus}, {"lambda", 1, Link::kSoftplus}};
  vspec.validate();
  ParamVector phi(4);
  phi << 0.3, -0.2, 0.6, 0.9;
  Matrix x(3, 1);
  x << 0.0, 1.0, 4.0;
  Predictions p = posterior_predictive(ens, vspec, phi, x);
  CHECK(p.aleatoric_var == aleatoric_variance(vspec, phi, x));
  for (int i = 0; i < 3; ++i) {
    double want = softplus(0.3 * x(i, 0) + 0.6) / softplus(-0.2 * x(i, 0) + 0.9);
    CHECK(p.aleatoric_var(i, 0) == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("member variance heads average into the aleatoric part") {
  PosteriorEnsemble ens;
  ens.spec = affine_mve();
  ens.provenance = Provenance::kEnsemble;
  std::vector<std::array<double, 4>> members = {
      {1.0, 0.2, 0.0, -0.5}, {0.6, -0.4, 0.3, 0.8}, {-0.2, 0.1, 1.0, 0.0}};
  for (const auto& m : members)
    ens.samples.push_back((ParamVector(4) << m[0], m[1], m[2], m[3]).finished());
  Matrix x(3, 1);
  x << -1.0, 0.5, 2.0;
  Predictions p = posterior_predictive(ens, x);
  for (int i = 0; i < 3; ++i) {
    double mu = 0.0, av = 0.0;
    for (const auto& m : members) {
      mu += m[0] * x(i, 0) + m[2];
      av += softplus(m[1] * x(i, 0) + m[3]);
    }
    mu /= 3.0;
    av /= 3.0;
    double ev = 0.0;
    for (const auto& m : members) {
      double d = m[0] * x(i, 0) + m[2] - mu;
      ev += d * d;
    }
    ev /= 3.0;
    CHECK(p.mean(i, 0) == doctest::Approx(mu).epsilon(1e-14));
    CHECK(p.aleatoric_var(i, 0) == doctest::Approx(av).epsilon(1e-13));
    CHECK(p.epistemic_var(i, 0) == doctest::Approx(ev).epsilon(1e-13));
  }

  // A single fitted net is the one-member case: its variance head passes
  // through and the epistemic part vanishes.
  PosteriorEnsemble solo;
  solo.spec = affine_mve();
  solo.samples.push_back(ens.samples[0]);
  Predictions ps = posterior_predictive(solo, x);
  CHECK(ps.epistemic_var == Matrix::Zero(3, 1));
  CHECK(ps.aleatoric_var(2, 0) ==
        doctest::Approx(softplus(0.2 * 2.0 - 0.5)).epsilon(1e-12));
}

TEST_CASE("unscaling predictions is the affine push-forward") {
  Scaler s;
  s.x_mean = Vector::Zero(1);
  s.x_std = Vector::Ones(1);
  s.y_mean = Vector::Constant(1, 2.0);
  s.y_std = Vector::Constant(1, 3.0);
  Predictions p = constant_predictions(2, 0.5, 0.2, 0.1);
  Predictions u = unscale_predictions(s, p);
  CHECK(u.mean(0, 0) == doctest::Approx(0.5 * 3.0 + 2.0).epsilon(1e-15));
  CHECK(u.aleatoric_var(0, 0) == doctest::Approx(0.2 * 9.0).epsilon(1e-15));
  CHECK(u.epistemic_var(1, 0) == doctest::Approx(0.1 * 9.0).epsilon(1e-15));
}

TEST_CASE("error metrics agree with plain loops") {
  Predictions perfect = constant_predictions(3, 1.5, 0.1, 0.0);
  Matrix y = Matrix::Constant(3, 1, 1.5);
  CHECK(rmse(perfect, y) == 0.0);
  CHECK(mae(perfect, y) == 0.0);

  // Scalar errors {3, 4} across two points.
  Predictions p2 = constant_predictions(2, 0.0, 0.1, 0.0);
  Matrix y2(2, 1);
  y2 << 3.0, -4.0;
  CHECK(rmse(p2, y2) == doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
  CHECK(mae(p2, y2) == doctest::Approx(3.5).epsilon(1e-15));

  // Two output dimensions: squared errors sum across columns per point.
  Predictions pd;
  pd.mean = Matrix::Zero(2, 2);
  pd.aleatoric_var = Matrix::Ones(2, 2);
  pd.epistemic_var = Matrix::Zero(2, 2);
  Matrix yd(2, 2);
  yd << 3.0, 4.0, 0.0, 0.0;
  CHECK(rmse(pd, yd) == doctest::Approx(std::sqrt(25.0 / 2.0)).epsilon(1e-15));
  CHECK(mae(pd, yd) == doctest::Approx(7.0 / 4.0).epsilon(1e-15));

  Rng rng(404);
  Predictions pr;
  pr.mean = Matrix::NullaryExpr(7, 2, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  pr.aleatoric_var = Matrix::Constant(7, 2, 0.5);
  pr.epistemic_var = Matrix::Zero(7, 2);
  Matrix yr = Matrix::NullaryExpr(7, 2, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  double sq = 0.0, ab = 0.0;
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 2; ++j) {
      double d = pr.mean(i, j) - yr(i, j);
      sq += d * d;
      ab += std::abs(d);
    }
  CHECK(rmse(pr, yr) == doctest::Approx(std::sqrt(sq / 7.0)).epsilon(1e-13));
  CHECK(mae(pr, yr) == doctest::Approx(ab / 14.0).epsilon(1e-13));

  CHECK_THROWS(rmse(pr, y2));
  CHECK_THROWS(mae(pr, y2));
}

TEST_CASE("log-likelihood includes its constants and peaks at the matched variance") {
  Predictions p = constant_predictions(1, 0.0, 1.0, 0.0);
  Matrix y0 = Matrix::Zero(1, 1);
  CHECK(tll(p, y0) == doctest::Approx(-0.5 * std::log(2.0 * kPi)).epsilon(1e-15));
  Matrix y1 = Matrix::Constant(1, 1, 1.0);
  CHECK(tll(p, y1) == doctest::Approx(-0.5 * std::log(2.0 * kPi) - 0.5).epsilon(1e-15));

  // Batch case against a plain loop, total and epistemic-only variants.
  Rng rng(505);
  Predictions pb;
  pb.mean = Matrix::NullaryExpr(6, 1, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  pb.aleatoric_var =
      Matrix::NullaryExpr(6, 1, [&](Eigen::Index, Eigen::Index) { return 0.3 + rng.uniform(); });
  pb.epistemic_var =
      Matrix::NullaryExpr(6, 1, [&](Eigen::Index, Eigen::Index) { return 0.1 + rng.uniform(); });
  Matrix yb = Matrix::NullaryExpr(6, 1, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  double want_total = 0.0, want_epi = 0.0;
  for (int i = 0; i < 6; ++i) {
    double d = yb(i, 0) - pb.mean(i, 0);
    double vt = pb.aleatoric_var(i, 0) + pb.epistemic_var(i, 0);
    double ve = pb.epistemic_var(i, 0);
    want_total += -0.5 * std::log(2.0 * kPi * vt) - d * d / (2.0 * vt);
    want_epi += -0.5 * std::log(2.0 * kPi * ve) - d * d / (2.0 * ve);
  }
  CHECK(tll(pb, yb) == doctest::Approx(want_total / 6.0).epsilon(1e-13));
  CHECK(tll(pb, yb, TllVariance::kEpistemic) == doctest::Approx(want_epi / 6.0).epsilon(1e-13));

  // At zero residual, inflating the variance only hurts; at residual r the
  // likelihood peaks at variance r^2.
  auto with_var = [](double v) { return constant_predictions(1, 0.0, v, 0.0); };
  CHECK(tll(with_var(1.0), y0) > tll(with_var(2.0), y0));
  Matrix yr = Matrix::Constant(1, 1, 0.7);
  double at_match = tll(with_var(0.49), yr);
  CHECK(at_match > tll(with_var(0.25), yr));
  CHECK(at_match > tll(with_var(1.0), yr));

  CHECK_THROWS(tll(constant_predictions(1, 0.0, 0.0, 0.0), y0));
  CHECK_THROWS(tll(p, y0, TllVariance::kEpistemic));  // epistemic part is zero
}

TEST_CASE("distribution distance follows the printed variance-difference form") {
  Predictions p = constant_predictions(2, 1.0, 4.0, 0.0);
  Matrix tm = Matrix::Constant(2, 1, 1.0);
  Matrix tv = Matrix::Constant(2, 1, 4.0);
  CHECK(wasserstein(p, tm, tv) == 0.0);

  // One point, mean gap 3, variance gap 4: the 3-4-5 triangle.
  Predictions q = constant_predictions(1, 0.0, 1.0, 0.0);
  Matrix m1 = Matrix::Constant(1, 1, 3.0);
  Matrix v1 = Matrix::Constant(1, 1, 5.0);
  CHECK(wasserstein(q, m1, v1) == doctest::Approx(5.0).epsilon(1e-15));

  // Same gaps in std mode compare standard deviations instead: truth std 3
  // vs predicted std 1.
  Matrix v9 = Matrix::Constant(1, 1, 9.0);
  CHECK(wasserstein(q, m1, v9) == doctest::Approx(std::sqrt(9.0 + 64.0)).epsilon(1e-14));
  CHECK(wasserstein(q, m1, v9, true) == doctest::Approx(std::sqrt(9.0 + 4.0)).epsilon(1e-14));

  Rng rng(606);
  Predictions pr;
  pr.mean = Matrix::NullaryExpr(5, 1, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  pr.aleatoric_var =
      Matrix::NullaryExpr(5, 1, [&](Eigen::Index, Eigen::Index) { return 0.2 + rng.uniform(); });
  pr.epistemic_var = Matrix::Zero(5, 1);
  Matrix tmr = Matrix::NullaryExpr(5, 1, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  Matrix tvr =
      Matrix::NullaryExpr(5, 1, [&](Eigen::Index, Eigen::Index) { return 0.2 + rng.uniform(); });
  double want = 0.0;
  for (int i = 0; i < 5; ++i) {
    double dm = tmr(i, 0) - pr.mean(i, 0);
    double dv = tvr(i, 0) - pr.aleatoric_var(i, 0);
    want += std::sqrt(dm * dm + dv * dv);
  }
  want /= 5.0;
  double got = wasserstein(pr, tmr, tvr);
  CHECK(got == doctest::Approx(want).epsilon(1e-13));
  CHECK(got >= 0.0);
}

TEST_CASE("the normal quantile function is sharp") {
  CHECK(normal_quantile(0.5) == 0.0);
  CHECK(normal_quantile(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-12));
  CHECK(normal_quantile(0.95) == doctest::Approx(1.6448536269514722).epsilon(1e-12));
  CHECK(normal_quantile(0.8413447460685429) == doctest::Approx(1.0).epsilon(1e-12));
  for (double p : {1e-6, 0.01, 0.2, 0.7, 0.99, 1.0 - 1e-6}) {
    double z = normal_quantile(p);
    CHECK(normal_quantile(1.0 - p) == doctest::Approx(-z).epsilon(1e-11));
    double back = 0.5 * std::erfc(-z / std::sqrt(2.0));
    CHECK(back == doctest::Approx(p).epsilon(1e-9));
  }
  CHECK_THROWS(normal_quantile(0.0));
  CHECK_THROWS(normal_quantile(1.0));
  CHECK_THROWS(normal_quantile(-0.3));
}

TEST_CASE("conformal calibration picks the corrected order statistic") {
  // Targets dead on the mean: every score is exactly -z, so q_hat is too.
  Predictions p = constant_predictions(20, 0.0, 1.0, 0.0);
  Matrix y = Matrix::Zero(20, 1);
  ConformalCalibration cal = conformal_calibrate(p, y, 0.1);
  double z = normal_quantile(0.95);
  CHECK(cal.q_hat == doctest::Approx(-z).epsilon(1e-14));
  CHECK(cal.q_hat < 0.0);

  // 99 scores i/100: k = ceil(100 * 0.9) = 90, so q_hat is the 90th smallest.
  int n = 99;
  Predictions pv = constant_predictions(n, 0.0, 1.0, 0.0);
  Matrix yv(n, 1);
  std::vector<double> scores;
  for (int i = 0; i < n; ++i) {
    double t = static_cast<double>((i * 37) % 99 + 1) / 100.0;  // shuffled 0.01..0.99
    yv(i, 0) = z + t;
    scores.push_back(t);
  }
  ConformalCalibration c99 = conformal_calibrate(pv, yv, 0.1);
  std::sort(scores.begin(), scores.end());
  CHECK(c99.q_hat == doctest::Approx(scores[89]).epsilon(1e-12));
  CHECK(c99.q_hat == doctest::Approx(0.90).epsilon(1e-12));

  Predictions tiny = constant_predictions(5, 0.0, 1.0, 0.0);
  Matrix ty = Matrix::Zero(5, 1);
  CHECK_THROWS(conformal_calibrate(tiny, ty, 0.1));  // needs the 6th of 5 scores
  Predictions none = constant_predictions(0, 0.0, 1.0, 0.0);
  Matrix ny(0, 1);
  CHECK_THROWS(conformal_calibrate(none, ny, 0.1));
  CHECK_THROWS(conformal_calibrate(p, y, 0.0));
  CHECK_THROWS(conformal_calibrate(p, y, 1.0));
}

TEST_CASE("coverage responds to the calibration as designed") {
  Rng rng(707);
  int n = 40;
  Predictions p = constant_predictions(n, 0.0, 1.0, 0.0);
  Matrix y = Matrix::NullaryExpr(n, 1, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });

  // A huge widening covers everything; zero-width intervals cover nothing.
  CoverageReport all = conformal_coverage({0.1, 1e6}, p, y);
  CHECK(all.coverage == 1.0);
  Predictions zerow = constant_predictions(n, 0.0, 0.0, 0.0);
  CoverageReport nothing = conformal_coverage({0.1, 0.0}, zerow, y);
  CHECK(nothing.coverage == 0.0);
  CHECK(nothing.mean_interval_length == 0.0);

  // Monotone in q_hat, and interval length grows by exactly 2 q_hat.
  CoverageReport a = conformal_coverage({0.1, -0.2}, p, y);
  CoverageReport b = conformal_coverage({0.1, 0.1}, p, y);
  CoverageReport c = conformal_coverage({0.1, 0.5}, p, y);
  CHECK(a.coverage <= b.coverage);
  CHECK(b.coverage <= c.coverage);
  CHECK(c.mean_interval_length - b.mean_interval_length == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("split-conformal intervals cover at their nominal rate") {
  // Exchangeable validation and test sets from the model the predictions
  // claim: coverage should land near the nominal 90%.
  Rng rng(808);
  int n = 1000;
  auto draw = [&](Predictions& p, Matrix& y) {
    p = constant_predictions(n, 0.0, 1.0, 0.0);
    y = Matrix::NullaryExpr(n, 1, [&](Eigen::Index, Eigen::Index) { return rng.normal(); });
  };
  Predictions pv, pt;
  Matrix yv, yt;
  draw(pv, yv);
  draw(pt, yt);
  ConformalCalibration cal = conformal_calibrate(pv, yv, 0.1);
  CoverageReport rep = conformal_coverage(cal, pt, yt);
  CHECK(rep.coverage >= 0.87);
  CHECK(rep.coverage <= 0.93);
  CHECK(rep.mean_interval_length > 0.0);
}

TEST_CASE("malformed prediction blocks are rejected") {
  Predictions p = constant_predictions(3, 0.0, 1.0, 0.0);
  p.epistemic_var = Matrix::Zero(2, 1);
  CHECK_THROWS(p.validate());
  Predictions q = constant_predictions(3, 0.0, 1.0, 0.0);
  q.aleatoric_var(1, 0) = -0.1;
  CHECK_THROWS(q.validate());
  Predictions r = constant_predictions(3, 0.0, 1.0, 0.0);
  r.mean(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(r.validate());
}
