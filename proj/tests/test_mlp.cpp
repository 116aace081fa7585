#include <doctest.h>

#include <cmath>

#include "coopuq/mlp.hpp"
#include "coopuq/rng.hpp"
#include "support.hpp"

using namespace coopuq;

namespace {

MlpSpec two_head_spec() {
  MlpSpec spec;
  spec.input_dim = 1;
  spec.hidden = {4, 3};
  spec.activation = Activation::kTanh;
  spec.heads = {{"mean", 1, Link::kIdentity}, {"var", 1, Link::kSoftplus}};
  return spec;
}

}  // namespace

TEST_CASE("parameter count matches the analytic layer formula") {
  MlpSpec tiny;
  tiny.input_dim = 1;
  tiny.heads = {{"mean", 1, Link::kIdentity}};
  CHECK(tiny.param_count() == 2);

  MlpSpec big;
  big.input_dim = 1;
  big.hidden = {256, 256};
  big.heads = {{"mean", 1, Link::kIdentity}};
  int expected = (1 * 256 + 256) + (256 * 256 + 256) + (256 * 1 + 1);
  CHECK(big.param_count() == expected);

  MlpSpec mixed = two_head_spec();
  CHECK(mixed.param_count() == (1 * 4 + 4) + (4 * 3 + 3) + (3 * 2 + 2));
}

TEST_CASE("init is seed-deterministic with zero biases and bounded weights") {
  MlpSpec spec = two_head_spec();
  ParamVector a = init_params(spec, 7);
  ParamVector b = init_params(spec, 7);
  ParamVector c = init_params(spec, 8);
  CHECK(a == b);
  CHECK(a != c);

  // biases of the first layer sit right after its 1x4 weight block
  for (int i = 4; i < 8; ++i) CHECK(a[i] == 0.0);
  // fan-in bound for first-layer weights (fan_in = 1)
  for (int i = 0; i < 4; ++i) CHECK(std::abs(a[i]) <= 1.0);
  // second layer: fan_in = 4
  for (int i = 8; i < 8 + 12; ++i) CHECK(std::abs(a[i]) <= 0.5);
}

TEST_CASE("zero parameters give zero identity outputs and softplus(0) on softplus heads") {
  MlpSpec spec = two_head_spec();
  ParamVector zero = ParamVector::Zero(spec.param_count());
  Matrix x(3, 1);
  x << -1.0, 0.0, 2.0;
  Matrix out = forward(spec, zero, x);
  for (int r = 0; r < 3; ++r) {
    CHECK(out(r, 0) == 0.0);
    CHECK(out(r, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-5));
  }
}

TEST_CASE("forward matches an independent straight-line evaluation") {
  MlpSpec spec = two_head_spec();
  ParamVector p = init_params(spec, 42);
  Rng rng(3);
  Matrix x(5, 1);
  for (int i = 0; i < 5; ++i) x(i, 0) = rng.uniform(-3.0, 3.0);
  Matrix out = forward(spec, p, x);
  for (int i = 0; i < 5; ++i) {
    auto naive = testsupport::naive_forward_row(spec, p, {x(i, 0)});
    CHECK(out(i, 0) == doctest::Approx(naive[0]).epsilon(1e-12));
    CHECK(out(i, 1) == doctest::Approx(naive[1]).epsilon(1e-12));
  }
}

TEST_CASE("relu variant matches the straight-line evaluation too") {
  MlpSpec spec = two_head_spec();
  spec.activation = Activation::kRelu;
  spec.hidden = {6};
  ParamVector p = init_params(spec, 19);
  Matrix x(4, 1);
  x << -2.0, -0.5, 0.5, 2.0;
  Matrix out = forward(spec, p, x);
  for (int i = 0; i < 4; ++i) {
    auto naive = testsupport::naive_forward_row(spec, p, {x(i, 0)});
    CHECK(out(i, 0) == doctest::Approx(naive[0]).epsilon(1e-12));
    CHECK(out(i, 1) == doctest::Approx(naive[1]).epsilon(1e-12));
  }
}

TEST_CASE("backward agrees with central finite differences through both links") {
  MlpSpec spec = two_head_spec();
  ParamVector p = init_params(spec, 5);
  Rng rng(11);
  Matrix x(6, 1);
  for (int i = 0; i < 6; ++i) x(i, 0) = rng.uniform(-2.0, 2.0);
  Matrix weight(6, 2);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 2; ++j) weight(i, j) = rng.normal();

  auto scalar = [&](const ParamVector& q) {
    return (forward(spec, q, x).cwiseProduct(weight)).sum();
  };
  ForwardTrace tr = forward_trace(spec, p, x);
  ParamVector grad = backward(spec, p, tr, weight);
  ParamVector fd = testsupport::fd_gradient(scalar, p);
  for (Eigen::Index i = 0; i < p.size(); ++i)
    CHECK(testsupport::rel_err(grad[i], fd[i], 1e-6) < 1e-5);
}

TEST_CASE("forward and backward are bit-deterministic") {
  MlpSpec spec = two_head_spec();
  ParamVector p = init_params(spec, 9);
  Matrix x(4, 1);
  x << 0.1, 0.2, 0.3, 0.4;
  Matrix d = Matrix::Ones(4, 2);
  ForwardTrace t1 = forward_trace(spec, p, x);
  ForwardTrace t2 = forward_trace(spec, p, x);
  CHECK(t1.outputs == t2.outputs);
  CHECK(backward(spec, p, t1, d) == backward(spec, p, t2, d));
}

TEST_CASE("dropout masks have the inverted-dropout structure") {
  MlpSpec spec = two_head_spec();
  spec.dropout_rate = 0.4;
  Rng rng(1);
  auto masks = make_dropout_masks(spec, 10, rng);
  REQUIRE(masks.size() == 2);
  CHECK(masks[0].rows() == 10);
  CHECK(masks[0].cols() == 4);
  double scale = 1.0 / 0.6;
  int zeros = 0;
  for (const auto& m : masks)
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      bool valid = m(i) == 0.0 || m(i) == doctest::Approx(scale);
      CHECK(valid);
      if (m(i) == 0.0) ++zeros;
    }
  CHECK(zeros > 0);
}

TEST_CASE("dropout passes average to the deterministic forward on an effectively linear net") {
  // Positive weights and positive inputs keep every relu active, so the
  // network is linear in the mask and the inverted-dropout expectation is the
  // plain forward pass.
  MlpSpec spec;
  spec.input_dim = 1;
  spec.hidden = {8};
  spec.activation = Activation::kRelu;
  spec.heads = {{"mean", 1, Link::kIdentity}};
  spec.dropout_rate = 0.3;
  Rng init_rng(2);
  ParamVector p(spec.param_count());
  for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = init_rng.uniform(0.1, 0.5);
  Matrix x(1, 1);
  x << 1.7;

  double det = forward(spec, p, x)(0, 0);
  Rng rng(77);
  const int passes = 10000;
  std::vector<double> vals;
  vals.reserve(passes);
  for (int s = 0; s < passes; ++s) {
    auto masks = make_dropout_masks(spec, 1, rng);
    vals.push_back(forward(spec, p, x, &masks)(0, 0));
  }
  double mean = testsupport::sample_mean(vals);
  double se = std::sqrt(testsupport::sample_var(vals) / passes);
  CHECK(std::abs(mean - det) < 3.0 * se + 1e-12);
}

TEST_CASE("invalid specs and mismatched inputs are rejected") {
  MlpSpec spec = two_head_spec();
  MlpSpec bad = spec;
  bad.input_dim = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.heads.clear();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.heads.push_back({"mean", 1, Link::kIdentity});
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.dropout_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = spec;
  bad.hidden = {0};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  ParamVector p = init_params(spec, 1);
  Matrix wrong(3, 2);
  wrong.setZero();
  CHECK_THROWS_AS(forward(spec, p, wrong), std::invalid_argument);
  ParamVector short_p = ParamVector::Zero(3);
  Matrix x = Matrix::Zero(3, 1);
  CHECK_THROWS_AS(forward(spec, short_p, x), std::invalid_argument);
  Rng rng(1);
  CHECK_THROWS_AS(make_dropout_masks(spec, 3, rng), std::invalid_argument);  // no dropout in spec
}
