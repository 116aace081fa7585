#include "coopuq/coop.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace coopuq {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

std::string strip_step_suffix(const std::string& s) {
  auto pos = s.rfind(" (step ");
  return pos == std::string::npos ? s : s.substr(0, pos);
}

[[noreturn]] void rethrow_tagged(const DivergenceError& e, const std::string& where) {
  throw DivergenceError(where + ": " + strip_step_suffix(e.what()), e.step());
}

Matrix ensemble_mean_prediction(const PosteriorEnsemble& ens, const Matrix& x) {
  std::vector<Matrix> outs = ensemble_outputs(ens, x);
  Matrix acc = Matrix::Zero(outs[0].rows(), outs[0].cols());
  for (const auto& o : outs) acc += o;
  acc /= static_cast<double>(outs.size());
  return head_block(ens.spec, acc, "mean");
}

ParamVector ensemble_mean_params(const PosteriorEnsemble& ens) {
  ParamVector acc = ParamVector::Zero(ens.samples[0].size());
  for (const auto& s : ens.samples) acc += s;
  return acc / static_cast<double>(ens.samples.size());
}

}  // namespace

void CoopConfig::validate(Eigen::Index output_dim) const {
  if (iterations < 1) throw ConfigError("coop: iterations must be >= 1");
  mean_spec.validate();
  var_spec.validate();
  if (initial_variance <= 0.0) throw ConfigError("coop: initial_variance must be positive");
  mean_spec.head("mean");  // throws if the mean head is missing
  if (var_spec.heads.size() != 2)
    throw ConfigError("coop: var_spec needs exactly the heads alpha and lambda");
  for (const char* name : {"alpha", "lambda"}) {
    const HeadSpec& h = var_spec.head(name);
    if (h.link != Link::kSoftplus)
      throw ConfigError(std::string("coop: var_spec head ") + name + " must use softplus");
    if (h.dim != output_dim)
      throw ConfigError(std::string("coop: var_spec head ") + name +
                        " dim must match the target dimension");
  }
  if (inference == CoopInference::kMcDropout) {
    if (mean_spec.dropout_rate <= 0.0)
      throw ConfigError("coop: mc_dropout inference needs mean_spec.dropout_rate > 0");
    if (mc_passes < 1) throw ConfigError("coop: mc_passes must be >= 1");
  }
}

Matrix aleatoric_variance(const MlpSpec& var_spec, const ParamVector& phi, const Matrix& x) {
  Matrix out = forward(var_spec, phi, x);
  Matrix alpha = head_block(var_spec, out, "alpha");
  Matrix lambda = head_block(var_spec, out, "lambda");
  return alpha.cwiseQuotient(lambda);
}

ParamVector train_variance_net(const MlpSpec& var_spec, const Dataset& ds,
                               const Matrix& mean_predictions, const TrainConfig& cfg) {
  ds.validate();
  if (mean_predictions.rows() != ds.n() || mean_predictions.cols() != ds.output_dim())
    throw std::invalid_argument("train_variance_net: mean_predictions shape mismatch");
  Matrix residuals = (mean_predictions - ds.y).array().square();
  if ((residuals.array() < kResidualFloor).all())
    throw std::runtime_error(
        "train_variance_net: every squared residual is below 1e-8; the mean interpolates "
        "the targets, so the noise fit is unconstrained. Add a noise floor to the data or "
        "train the mean less aggressively");
  residuals = residuals.cwiseMax(kResidualFloor);

  Dataset res;
  res.x = ds.x;
  res.y = residuals;
  GammaNllObjective obj;
  if (cfg.patience > 0) {
    SplitSpec sp;
    sp.train_fraction = 0.8;
    sp.val_fraction = 0.2;
    sp.seed = derive_seed(cfg.seed, 7);
    SplitResult parts = split(res, sp);
    if (parts.train.n() > 0 && parts.val.n() > 0)
      return train_map(var_spec, parts.train, obj, cfg, &parts.val);
    TrainConfig no_stop = cfg;  // too few rows to hold any out
    no_stop.patience = 0;
    return train_map(var_spec, res, obj, no_stop);
  }
  return train_map(var_spec, res, obj, cfg);
}

double log_marginal_likelihood(const PosteriorEnsemble& ensemble, const MlpSpec& var_spec,
                               const ParamVector& phi, const Dataset& ds) {
  ds.validate();
  Matrix var = aleatoric_variance(var_spec, phi, ds.x);
  if (var.rows() != ds.n() || var.cols() != ds.output_dim())
    throw std::invalid_argument("log_marginal_likelihood: variance shape mismatch");
  std::vector<Matrix> outs = ensemble_outputs(ensemble, ds.x);
  std::vector<double> ll(outs.size());
  for (std::size_t s = 0; s < outs.size(); ++s) {
    Matrix mean = head_block(ensemble.spec, outs[s], "mean");
    double acc = 0.0;
    for (Eigen::Index i = 0; i < ds.n(); ++i)
      for (Eigen::Index j = 0; j < ds.output_dim(); ++j) {
        double v = var(i, j);
        double d = ds.y(i, j) - mean(i, j);
        acc += -0.5 * std::log(kTwoPi * v) - d * d / (2.0 * v);
      }
    if (!std::isfinite(acc))
      throw std::runtime_error("log_marginal_likelihood: non-finite log-likelihood for draw " +
                               std::to_string(s));
    ll[s] = acc;
  }
  double peak = *std::max_element(ll.begin(), ll.end());
  double mean_exp = 0.0;
  for (double v : ll) mean_exp += std::exp(v - peak);
  mean_exp /= static_cast<double>(ll.size());
  return peak + std::log(mean_exp);
}

int select_best(const std::vector<double>& lmglk) {
  if (lmglk.empty()) throw std::invalid_argument("select_best: empty trace");
  int best = 0;
  for (int i = 1; i < static_cast<int>(lmglk.size()); ++i)
    if (lmglk[i] > lmglk[best]) best = i;
  return best;
}

CoopResult coop_train(const Dataset& train, const CoopConfig& cfg) {
  train.validate();
  cfg.validate(train.output_dim());

  CoopResult result;
  try {
    result.map_params = train_map(cfg.mean_spec, train, FixedVarNllObjective{cfg.initial_variance},
                                  cfg.mean_cfg);
  } catch (const DivergenceError& e) {
    rethrow_tagged(e, "coop mean fit");
  }

  Matrix current_mean =
      head_block(cfg.mean_spec, forward(cfg.mean_spec, result.map_params, train.x), "mean");
  ParamVector warm_start = result.map_params;
  std::vector<double> trace;

  for (int round = 0; round < cfg.iterations; ++round) {
    CoopIteration it;
    std::string tag = "coop round " + std::to_string(round + 1);

    TrainConfig var_cfg = cfg.var_cfg;
    var_cfg.seed = derive_seed(cfg.var_cfg.seed, static_cast<std::uint64_t>(round));
    try {
      it.var_params = train_variance_net(cfg.var_spec, train, current_mean, var_cfg);
    } catch (const DivergenceError& e) {
      rethrow_tagged(e, tag + " noise fit");
    }
    it.aleatoric_train = aleatoric_variance(cfg.var_spec, it.var_params, train.x);

    try {
      switch (cfg.inference) {
        case CoopInference::kMcDropout: {
          PosteriorEnsemble ens;
          ens.spec = cfg.mean_spec;
          ens.samples = {warm_start};
          ens.provenance = Provenance::kMcDropout;
          ens.mc_passes = cfg.mc_passes;
          ens.mc_seed = derive_seed(cfg.bnn_cfg.seed, 1000 + static_cast<std::uint64_t>(round));
          ens.validate();
          it.ensemble = std::move(ens);
          break;
        }
        case CoopInference::kBbb: {
          BbbConfig bbb_cfg = cfg.bbb_cfg;
          bbb_cfg.seed = derive_seed(cfg.bbb_cfg.seed, static_cast<std::uint64_t>(round));
          it.ensemble = train_bbb(cfg.mean_spec, train, it.aleatoric_train, cfg.prior, bbb_cfg,
                                  nullptr, &warm_start);
          break;
        }
        case CoopInference::kPsgld: {
          PsgldConfig bnn_cfg = cfg.bnn_cfg;
          bnn_cfg.seed = derive_seed(cfg.bnn_cfg.seed, static_cast<std::uint64_t>(round));
          it.ensemble = sample_psgld(cfg.mean_spec, warm_start, train, it.aleatoric_train,
                                     cfg.prior, bnn_cfg);
          break;
        }
      }
    } catch (const DivergenceError& e) {
      rethrow_tagged(e, tag + " posterior sampling");
    }
    it.ensemble.aleatoric_params = it.var_params;

    it.lmglk = log_marginal_likelihood(it.ensemble, cfg.var_spec, it.var_params, train);
    trace.push_back(it.lmglk);

    current_mean = ensemble_mean_prediction(it.ensemble, train.x);
    warm_start = ensemble_mean_params(it.ensemble);
    result.iterations.push_back(std::move(it));
  }

  result.selected = select_best(trace);
  return result;
}

}  // namespace coopuq
