#pragma once

// Shared oracles for the test suite: central finite differences, a
// straight-line network forward pass kept deliberately independent of the
// library implementation, a Kolmogorov-Smirnov test, and batch-means
// standard errors for Markov chains.

#include <cmath>
#include <functional>
#include <vector>

#include "coopuq/common.hpp"
#include "coopuq/mlp.hpp"

namespace testsupport {

using coopuq::Matrix;
using coopuq::ParamVector;

// Central finite difference of f along coordinate i.
inline double fd_partial(const std::function<double(const ParamVector&)>& f, ParamVector p,
                         Eigen::Index i, double h) {
  double orig = p[i];
  p[i] = orig + h;
  double up = f(p);
  p[i] = orig - h;
  double down = f(p);
  return (up - down) / (2.0 * h);
}

inline ParamVector fd_gradient(const std::function<double(const ParamVector&)>& f,
                               const ParamVector& p, double h_scale = 1e-4) {
  ParamVector g(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    double h = h_scale * std::max(1.0, std::abs(p[i]));
    g[i] = fd_partial(f, p, i, h);
  }
  return g;
}

inline double rel_err(double got, double want, double floor = 1e-8) {
  return std::abs(got - want) / std::max(std::abs(want), floor);
}

// Plain-loop MLP forward over the documented flat layout (per-layer W block
// column-major, then biases). No Eigen products, no shared code with the
// library path.
inline std::vector<double> naive_forward_row(const coopuq::MlpSpec& spec, const ParamVector& params,
                                             const std::vector<double>& input) {
  auto widths = spec.layer_widths();
  std::vector<double> cur = input;
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    int in_w = widths[l];
    int out_w = widths[l + 1];
    std::vector<double> next(out_w, 0.0);
    for (int j = 0; j < out_w; ++j) {
      double z = params[off + in_w * out_w + j];  // bias
      for (int i = 0; i < in_w; ++i) z += cur[i] * params[off + j * in_w + i];
      next[j] = z;
    }
    off += in_w * out_w + out_w;
    bool last = (l + 2 == widths.size());
    if (!last) {
      for (int j = 0; j < out_w; ++j)
        next[j] = spec.activation == coopuq::Activation::kTanh ? std::tanh(next[j])
                                                               : std::max(0.0, next[j]);
    }
    cur = next;
  }
  // links
  int col = 0;
  for (const auto& h : spec.heads) {
    for (int d = 0; d < h.dim; ++d, ++col) {
      if (h.link == coopuq::Link::kSoftplus) {
        double z = cur[col];
        double sp = z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
        cur[col] = sp + coopuq::kPositiveFloor;
      }
    }
  }
  return cur;
}

// One-sided KS statistic against a continuous CDF; samples need not be sorted.
inline double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf) {
  std::sort(samples.begin(), samples.end());
  double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double f = cdf(samples[i]);
    double lo = static_cast<double>(i) / n;
    double hi = static_cast<double>(i + 1) / n;
    d = std::max(d, std::max(std::abs(f - lo), std::abs(hi - f)));
  }
  return d;
}

// Asymptotic KS p-value with Stephens' small-sample correction.
inline double ks_pvalue(double d, std::size_t n) {
  double sn = std::sqrt(static_cast<double>(n));
  double lambda = (sn + 0.12 + 0.11 / sn) * d;
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    double term = 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * lambda * lambda);
    sum += term;
    if (std::abs(term) < 1e-12) break;
  }
  return std::min(1.0, std::max(0.0, sum));
}

// Standard error of the chain mean via non-overlapping batch means.
inline double batch_means_se(const std::vector<double>& chain, int n_batches = 50) {
  std::size_t per = chain.size() / n_batches;
  std::vector<double> means;
  for (int b = 0; b < n_batches; ++b) {
    double s = 0.0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) s += chain[i];
    means.push_back(s / static_cast<double>(per));
  }
  double m = 0.0;
  for (double v : means) m += v;
  m /= means.size();
  double var = 0.0;
  for (double v : means) var += (v - m) * (v - m);
  var /= (means.size() - 1);
  return std::sqrt(var / means.size());
}

inline double sample_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_var(const std::vector<double>& v) {
  double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

}  // namespace testsupport
