#include "coopuq/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

namespace coopuq {

namespace {

using nlohmann::json;

// Sub-seed streams, all derived from the per-run seed.
constexpr std::uint64_t kStreamData = 1;
constexpr std::uint64_t kStreamSplit = 2;
constexpr std::uint64_t kStreamTrain = 3;
constexpr std::uint64_t kStreamPosterior = 4;
constexpr std::uint64_t kStreamConformalVal = 5;
constexpr std::uint64_t kStreamConformalTest = 6;
constexpr std::uint64_t kStreamPasses = 7;
constexpr std::uint64_t kStreamNoiseFit = 8;
constexpr std::uint64_t kStreamMember = 100;  // +i per ensemble member

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError("config " + path + ": " + what);
}

// ---------------------------------------------------------------------------
// enum <-> string

std::string method_name(Method m) {
  switch (m) {
    case Method::kMeMse: return "me_mse";
    case Method::kMveBetaNll: return "mve_beta_nll";
    case Method::kMveEnsemble: return "mve_ensemble";
    case Method::kMveMcDropout: return "mve_mc_dropout";
    case Method::kBnnEndToEnd: return "bnn_end_to_end";
    case Method::kBnnVe: return "bnn_ve";
  }
  throw std::logic_error("unreachable method");
}

Method method_from(const std::string& s, const std::string& path) {
  for (Method m : {Method::kMeMse, Method::kMveBetaNll, Method::kMveEnsemble,
                   Method::kMveMcDropout, Method::kBnnEndToEnd, Method::kBnnVe})
    if (method_name(m) == s) return m;
  fail(path, "unknown method '" + s + "'");
}

std::string source_name(DataSource s) {
  switch (s) {
    case DataSource::kHeteroscedastic: return "heteroscedastic";
    case DataSource::kHomoscedastic: return "homoscedastic";
    case DataSource::kCsv: return "csv";
  }
  throw std::logic_error("unreachable source");
}

DataSource source_from(const std::string& s, const std::string& path) {
  for (DataSource d : {DataSource::kHeteroscedastic, DataSource::kHomoscedastic, DataSource::kCsv})
    if (source_name(d) == s) return d;
  fail(path, "unknown dataset source '" + s + "'");
}

std::string inference_name(CoopInference i) {
  switch (i) {
    case CoopInference::kPsgld: return "psgld";
    case CoopInference::kMcDropout: return "mc_dropout";
    case CoopInference::kBbb: return "bbb";
  }
  throw std::logic_error("unreachable inference");
}

CoopInference inference_from(const std::string& s, const std::string& path) {
  for (CoopInference i : {CoopInference::kPsgld, CoopInference::kMcDropout, CoopInference::kBbb})
    if (inference_name(i) == s) return i;
  fail(path, "unknown inference '" + s + "'");
}

std::string activation_name(Activation a) {
  return a == Activation::kTanh ? "tanh" : "relu";
}

Activation activation_from(const std::string& s, const std::string& path) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "relu") return Activation::kRelu;
  fail(path, "unknown activation '" + s + "'");
}

// ---------------------------------------------------------------------------
// JSON extraction with field paths

std::string join_path(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) fail(path.empty() ? "(top level)" : path, "expected an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) { known = true; break; }
    if (!known) fail(join_path(path, item.key()), "unknown field");
  }
}

void get_double(const json& j, const char* key, const std::string& path, double& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number()) fail(join_path(path, key), "expected a number");
  out = v.get<double>();
}

void get_int(const json& j, const char* key, const std::string& path, int& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer()) fail(join_path(path, key), "expected an integer");
  out = v.get<int>();
}

void get_long(const json& j, const char* key, const std::string& path, long& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer()) fail(join_path(path, key), "expected an integer");
  out = v.get<long>();
}

void get_bool(const json& j, const char* key, const std::string& path, bool& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_boolean()) fail(join_path(path, key), "expected a boolean");
  out = v.get<bool>();
}

void get_string(const json& j, const char* key, const std::string& path, std::string& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_string()) fail(join_path(path, key), "expected a string");
  out = v.get<std::string>();
}

void get_int_vec(const json& j, const char* key, const std::string& path, std::vector<int>& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array()) fail(join_path(path, key), "expected an array of integers");
  out.clear();
  for (const auto& e : v) {
    if (!e.is_number_integer()) fail(join_path(path, key), "expected an array of integers");
    out.push_back(e.get<int>());
  }
}

void parse_train(const json& j, const std::string& path, TrainConfig& out) {
  check_keys(j, path, {"epochs", "batch_size", "learning_rate", "kappa", "patience"});
  get_int(j, "epochs", path, out.epochs);
  get_long(j, "batch_size", path, out.batch_size);
  get_double(j, "learning_rate", path, out.adam.learning_rate);
  get_double(j, "kappa", path, out.kappa);
  get_int(j, "patience", path, out.patience);
}

json train_json(const TrainConfig& t) {
  return json{{"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"learning_rate", t.adam.learning_rate},
              {"kappa", t.kappa},
              {"patience", t.patience}};
}

// ---------------------------------------------------------------------------
// metric bookkeeping

const std::set<std::string>& known_metrics() {
  static const std::set<std::string> k = {"rmse", "mae",           "tll",     "epistemic_tll",
                                          "wasserstein", "epistemic_mean", "coverage"};
  return k;
}

bool has_predictive_variance(Method m) { return m != Method::kMeMse; }

bool has_weight_uncertainty(Method m) {
  return m == Method::kMveEnsemble || m == Method::kMveMcDropout || m == Method::kBnnEndToEnd ||
         m == Method::kBnnVe;
}

std::vector<std::string> default_metrics(Method m, DataSource src) {
  if (m == Method::kMeMse) return {"rmse", "mae"};
  std::vector<std::string> out = {"rmse", "mae", "tll", "coverage"};
  if (src != DataSource::kCsv) out.push_back("wasserstein");
  if (has_weight_uncertainty(m)) out.push_back("epistemic_mean");
  return out;
}

std::vector<std::string> resolve_metrics(const ExperimentConfig& cfg) {
  return cfg.metrics.empty() ? default_metrics(cfg.method.kind, cfg.dataset.source) : cfg.metrics;
}

bool wants(const std::vector<std::string>& metrics, const char* name) {
  return std::find(metrics.begin(), metrics.end(), name) != metrics.end();
}

}  // namespace

std::string to_string(Method m) { return method_name(m); }

// ---------------------------------------------------------------------------
// config validation

void ExperimentConfig::validate() const {
  const DatasetConfig& d = dataset;
  if (seeds.empty()) fail("seeds", "need at least one seed");
  {
    std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
    if (uniq.size() != seeds.size()) fail("seeds", "duplicate seeds double-count aggregates");
  }
  if (!(d.train_fraction > 0.0 && d.train_fraction <= 1.0))
    fail("dataset.train_fraction", "must lie in (0, 1]");
  if (!(d.val_fraction >= 0.0 && d.val_fraction < 1.0))
    fail("dataset.val_fraction", "must lie in [0, 1)");
  if (d.train_fraction + d.val_fraction > 1.0 + 1e-12)
    fail("dataset.val_fraction", "train and validation fractions exceed 1");
  if (d.source == DataSource::kCsv) {
    if (d.csv_path.empty()) fail("dataset.csv_path", "required for the csv source");
    if (d.target_columns.empty()) fail("dataset.target_columns", "required for the csv source");
    if (d.train_fraction + d.val_fraction >= 1.0 - 1e-12)
      fail("dataset.train_fraction", "csv evaluation needs a nonempty test fraction");
  } else {
    if (d.n < 2) fail("dataset.n", "need at least two points");
    if (!(d.x_low < d.x_high)) fail("dataset.x_low", "x_low must be below x_high");
  }
  for (int h : model.hidden)
    if (h < 1) fail("model.hidden", "layer widths must be positive");
  for (int h : model.var_hidden)
    if (h < 1) fail("model.var_hidden", "layer widths must be positive");
  if (!(model.dropout_rate >= 0.0 && model.dropout_rate < 1.0))
    fail("model.dropout_rate", "must lie in [0, 1)");

  const MethodConfig& m = method;
  if (m.kind == Method::kMveBetaNll && !(m.beta >= 0.0 && m.beta <= 1.0))
    fail("method.beta", "must lie in [0, 1]");
  if (m.kind == Method::kMveEnsemble && m.members < 2)
    fail("method.members", "an ensemble needs at least two members");
  const bool uses_dropout = m.kind == Method::kMveMcDropout ||
                            (m.kind == Method::kBnnVe && m.inference == CoopInference::kMcDropout);
  if (uses_dropout) {
    if (model.dropout_rate <= 0.0)
      fail("model.dropout_rate", "stochastic passes need a positive dropout rate");
    if (m.passes < 2) fail("method.passes", "need at least two stochastic passes");
  }
  if (m.fixed_variance.has_value()) {
    if (m.kind != Method::kBnnEndToEnd)
      fail("method.fixed_variance", "only bnn_end_to_end takes a fixed variance");
    if (*m.fixed_variance <= 0.0) fail("method.fixed_variance", "must be positive");
  }

  if (training.epochs < 1) fail("training.epochs", "must be >= 1");
  if (training.adam.learning_rate <= 0.0) fail("training.learning_rate", "must be positive");
  if (training.batch_size < 0) fail("training.batch_size", "must be >= 0");
  if (training.kappa < 0.0) fail("training.kappa", "must be >= 0");
  if (training.patience < 0) fail("training.patience", "must be >= 0");
  if (training.patience > 0) {
    if (m.kind == Method::kBnnVe)
      fail("training.patience", "the cooperative warm-up trains without a validation set");
    if (d.val_fraction <= 0.0)
      fail("training.patience", "early stopping needs dataset.val_fraction > 0");
  }
  if (variance_training.epochs < 1) fail("variance_training.epochs", "must be >= 1");
  if (variance_training.adam.learning_rate <= 0.0)
    fail("variance_training.learning_rate", "must be positive");
  if (variance_training.patience < 0) fail("variance_training.patience", "must be >= 0");

  if (sampler.sgld.learning_rate <= 0.0) fail("sampler.learning_rate", "must be positive");
  if (sampler.sgld.batch_size < 0) fail("sampler.batch_size", "must be >= 0");
  if (sampler.sgld.temperature < 0.0) fail("sampler.temperature", "must be >= 0");
  if (!(sampler.sgld.precond_smoothing > 0.0 && sampler.sgld.precond_smoothing <= 1.0))
    fail("sampler.precond_smoothing", "must lie in (0, 1]");
  if (sampler.sgld.precond_epsilon <= 0.0) fail("sampler.precond_epsilon", "must be positive");
  if (sampler.sgld.lr_decay < 0.0) fail("sampler.lr_decay", "must be >= 0");
  if (sampler.burn_in_epochs < 0) fail("sampler.burn_in_epochs", "must be >= 0");
  if (sampler.thin_epochs < 0) fail("sampler.thin_epochs", "must be >= 0");
  if (sampler.n_samples < 1) fail("sampler.n_samples", "must be >= 1");

  if (bbb.epochs < 0) fail("bbb.epochs", "must be >= 0");
  if (bbb.n_samples < 1) fail("bbb.n_samples", "must be >= 1");
  if (bbb.sigma_init <= 0.0) fail("bbb.sigma_init", "must be positive");
  if (bbb.likelihood_weight < 0.0) fail("bbb.likelihood_weight", "must be >= 0");
  if (bbb.adam.learning_rate <= 0.0) fail("bbb.learning_rate", "must be positive");

  const bool bayesian = m.kind == Method::kBnnEndToEnd || m.kind == Method::kBnnVe;
  if (bayesian && prior.kappa <= 0.0) fail("prior.kappa", "must be positive for weight posteriors");
  if (coop_iterations < 1) fail("coop.iterations", "must be >= 1");
  if (initial_variance <= 0.0) fail("coop.initial_variance", "must be positive");
  if (!(conformal_alpha > 0.0 && conformal_alpha < 1.0))
    fail("evaluation.conformal_alpha", "must lie strictly in (0, 1)");
  if (conformal_points < 2) fail("evaluation.conformal_points", "must be >= 2");
  if (parallel < 1) fail("parallel", "must be >= 1");

  for (const std::string& name : metrics) {
    if (known_metrics().count(name) == 0) fail("metrics", "unknown metric '" + name + "'");
    if (!has_predictive_variance(m.kind) && name != "rmse" && name != "mae" && name != "coverage")
      fail("metrics", "'" + name + "' needs a predictive variance; " + method_name(m.kind) +
                          " provides none");
    if ((name == "epistemic_tll" || name == "epistemic_mean") && !has_weight_uncertainty(m.kind))
      fail("metrics",
           "'" + name + "' needs weight uncertainty; " + method_name(m.kind) + " is a point fit");
    if (name == "wasserstein" && d.source == DataSource::kCsv)
      fail("metrics", "'wasserstein' needs the generator ground truth");
  }
  if (wants(resolve_metrics(*this), "coverage")) {
    if (d.source == DataSource::kCsv && d.val_fraction <= 0.0)
      fail("dataset.val_fraction", "conformal calibration on csv data needs a validation split");
    if (d.source != DataSource::kCsv) {
      double need = (1.0 - conformal_alpha) / conformal_alpha;
      if (static_cast<double>(conformal_points) < need)
        fail("evaluation.conformal_points", "too few points for the conformal quantile");
    }
  }
}

// ---------------------------------------------------------------------------
// config parse / echo

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  check_keys(j, "",
             {"name", "dataset", "method", "model", "training", "variance_training", "sampler",
              "bbb", "prior", "coop", "seeds", "metrics", "evaluation", "output_dir", "parallel"});
  get_string(j, "name", "", cfg.name);
  get_string(j, "output_dir", "", cfg.output_dir);
  get_int(j, "parallel", "", cfg.parallel);

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, "dataset", {"source", "n", "x_low", "x_high", "csv_path", "target_columns",
                              "header", "train_fraction", "val_fraction", "standardize"});
    std::string src;
    get_string(d, "source", "dataset", src);
    if (!src.empty()) cfg.dataset.source = source_from(src, "dataset.source");
    get_int(d, "n", "dataset", cfg.dataset.n);
    get_double(d, "x_low", "dataset", cfg.dataset.x_low);
    get_double(d, "x_high", "dataset", cfg.dataset.x_high);
    get_string(d, "csv_path", "dataset", cfg.dataset.csv_path);
    get_int_vec(d, "target_columns", "dataset", cfg.dataset.target_columns);
    get_bool(d, "header", "dataset", cfg.dataset.header);
    get_double(d, "train_fraction", "dataset", cfg.dataset.train_fraction);
    get_double(d, "val_fraction", "dataset", cfg.dataset.val_fraction);
    get_bool(d, "standardize", "dataset", cfg.dataset.standardize);
  }

  if (j.contains("method")) {
    const json& m = j.at("method");
    check_keys(m, "method", {"kind", "beta", "members", "passes", "inference", "fixed_variance"});
    std::string kind;
    get_string(m, "kind", "method", kind);
    if (!kind.empty()) cfg.method.kind = method_from(kind, "method.kind");
    if (cfg.method.kind == Method::kMveBetaNll && !m.contains("beta"))
      fail("method.beta", "required for mve_beta_nll");
    get_double(m, "beta", "method", cfg.method.beta);
    get_int(m, "members", "method", cfg.method.members);
    get_int(m, "passes", "method", cfg.method.passes);
    std::string inf;
    get_string(m, "inference", "method", inf);
    if (!inf.empty()) cfg.method.inference = inference_from(inf, "method.inference");
    if (m.contains("fixed_variance") && !m.at("fixed_variance").is_null()) {
      if (!m.at("fixed_variance").is_number())
        fail("method.fixed_variance", "expected a number");
      cfg.method.fixed_variance = m.at("fixed_variance").get<double>();
    }
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "model", {"hidden", "activation", "dropout_rate", "var_hidden"});
    get_int_vec(m, "hidden", "model", cfg.model.hidden);
    std::string act;
    get_string(m, "activation", "model", act);
    if (!act.empty()) cfg.model.activation = activation_from(act, "model.activation");
    get_double(m, "dropout_rate", "model", cfg.model.dropout_rate);
    get_int_vec(m, "var_hidden", "model", cfg.model.var_hidden);
  }

  if (j.contains("training")) parse_train(j.at("training"), "training", cfg.training);
  if (j.contains("variance_training"))
    parse_train(j.at("variance_training"), "variance_training", cfg.variance_training);

  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    check_keys(s, "sampler",
               {"learning_rate", "batch_size", "temperature", "precond_smoothing",
                "precond_epsilon", "lr_decay", "burn_in_epochs", "thin_epochs", "n_samples"});
    get_double(s, "learning_rate", "sampler", cfg.sampler.sgld.learning_rate);
    get_long(s, "batch_size", "sampler", cfg.sampler.sgld.batch_size);
    get_double(s, "temperature", "sampler", cfg.sampler.sgld.temperature);
    get_double(s, "precond_smoothing", "sampler", cfg.sampler.sgld.precond_smoothing);
    get_double(s, "precond_epsilon", "sampler", cfg.sampler.sgld.precond_epsilon);
    get_double(s, "lr_decay", "sampler", cfg.sampler.sgld.lr_decay);
    get_int(s, "burn_in_epochs", "sampler", cfg.sampler.burn_in_epochs);
    get_int(s, "thin_epochs", "sampler", cfg.sampler.thin_epochs);
    get_int(s, "n_samples", "sampler", cfg.sampler.n_samples);
  }

  if (j.contains("bbb")) {
    const json& b = j.at("bbb");
    check_keys(b, "bbb", {"epochs", "batch_size", "n_samples", "likelihood_weight", "sigma_init",
                          "learning_rate"});
    get_int(b, "epochs", "bbb", cfg.bbb.epochs);
    get_long(b, "batch_size", "bbb", cfg.bbb.batch_size);
    get_int(b, "n_samples", "bbb", cfg.bbb.n_samples);
    get_double(b, "likelihood_weight", "bbb", cfg.bbb.likelihood_weight);
    get_double(b, "sigma_init", "bbb", cfg.bbb.sigma_init);
    get_double(b, "learning_rate", "bbb", cfg.bbb.adam.learning_rate);
  }

  if (j.contains("prior")) {
    check_keys(j.at("prior"), "prior", {"kappa"});
    get_double(j.at("prior"), "kappa", "prior", cfg.prior.kappa);
  }

  if (j.contains("coop")) {
    const json& c = j.at("coop");
    check_keys(c, "coop", {"iterations", "initial_variance"});
    get_int(c, "iterations", "coop", cfg.coop_iterations);
    get_double(c, "initial_variance", "coop", cfg.initial_variance);
  }

  if (j.contains("seeds")) {
    const json& s = j.at("seeds");
    if (!s.is_array()) fail("seeds", "expected an array of integers");
    cfg.seeds.clear();
    for (const auto& e : s) {
      if (!e.is_number_integer() || (e.is_number_integer() && e.get<long long>() < 0))
        fail("seeds", "expected non-negative integers");
      cfg.seeds.push_back(e.get<std::uint64_t>());
    }
  }

  if (j.contains("metrics")) {
    const json& m = j.at("metrics");
    if (!m.is_array()) fail("metrics", "expected an array of metric names");
    cfg.metrics.clear();
    for (const auto& e : m) {
      if (!e.is_string()) fail("metrics", "expected an array of metric names");
      cfg.metrics.push_back(e.get<std::string>());
    }
  }

  if (j.contains("evaluation")) {
    const json& e = j.at("evaluation");
    check_keys(e, "evaluation", {"conformal_alpha", "conformal_points"});
    get_double(e, "conformal_alpha", "evaluation", cfg.conformal_alpha);
    get_int(e, "conformal_points", "evaluation", cfg.conformal_points);
  }

  cfg.validate();
  return cfg;
}

std::string config_json(const ExperimentConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["dataset"] = {{"source", source_name(cfg.dataset.source)},
                  {"n", cfg.dataset.n},
                  {"x_low", cfg.dataset.x_low},
                  {"x_high", cfg.dataset.x_high},
                  {"csv_path", cfg.dataset.csv_path},
                  {"target_columns", cfg.dataset.target_columns},
                  {"header", cfg.dataset.header},
                  {"train_fraction", cfg.dataset.train_fraction},
                  {"val_fraction", cfg.dataset.val_fraction},
                  {"standardize", cfg.dataset.standardize}};
  j["method"] = {{"kind", method_name(cfg.method.kind)},
                 {"beta", cfg.method.beta},
                 {"members", cfg.method.members},
                 {"passes", cfg.method.passes},
                 {"inference", inference_name(cfg.method.inference)},
                 {"fixed_variance", cfg.method.fixed_variance.has_value()
                                        ? json(*cfg.method.fixed_variance)
                                        : json(nullptr)}};
  j["model"] = {{"hidden", cfg.model.hidden},
                {"activation", activation_name(cfg.model.activation)},
                {"dropout_rate", cfg.model.dropout_rate},
                {"var_hidden", cfg.model.var_hidden}};
  j["training"] = train_json(cfg.training);
  j["variance_training"] = train_json(cfg.variance_training);
  j["sampler"] = {{"learning_rate", cfg.sampler.sgld.learning_rate},
                  {"batch_size", cfg.sampler.sgld.batch_size},
                  {"temperature", cfg.sampler.sgld.temperature},
                  {"precond_smoothing", cfg.sampler.sgld.precond_smoothing},
                  {"precond_epsilon", cfg.sampler.sgld.precond_epsilon},
                  {"lr_decay", cfg.sampler.sgld.lr_decay},
                  {"burn_in_epochs", cfg.sampler.burn_in_epochs},
                  {"thin_epochs", cfg.sampler.thin_epochs},
                  {"n_samples", cfg.sampler.n_samples}};
  j["bbb"] = {{"epochs", cfg.bbb.epochs},
              {"batch_size", cfg.bbb.batch_size},
              {"n_samples", cfg.bbb.n_samples},
              {"likelihood_weight", cfg.bbb.likelihood_weight},
              {"sigma_init", cfg.bbb.sigma_init},
              {"learning_rate", cfg.bbb.adam.learning_rate}};
  j["prior"] = {{"kappa", cfg.prior.kappa}};
  j["coop"] = {{"iterations", cfg.coop_iterations}, {"initial_variance", cfg.initial_variance}};
  j["seeds"] = cfg.seeds;
  j["metrics"] = cfg.metrics;
  j["evaluation"] = {{"conformal_alpha", cfg.conformal_alpha},
                     {"conformal_points", cfg.conformal_points}};
  j["output_dir"] = cfg.output_dir;
  j["parallel"] = cfg.parallel;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// the per-seed pipeline

namespace {

MlpSpec mean_spec_for(const ExperimentConfig& cfg, Eigen::Index in, Eigen::Index out) {
  MlpSpec s;
  s.input_dim = static_cast<int>(in);
  s.hidden = cfg.model.hidden;
  s.activation = cfg.model.activation;
  s.dropout_rate = cfg.model.dropout_rate;
  s.heads = {{"mean", static_cast<int>(out), Link::kIdentity}};
  return s;
}

MlpSpec mve_spec_for(const ExperimentConfig& cfg, Eigen::Index in, Eigen::Index out) {
  MlpSpec s = mean_spec_for(cfg, in, out);
  s.heads.push_back({"var", static_cast<int>(out), Link::kSoftplus});
  return s;
}

MlpSpec noise_spec_for(const ExperimentConfig& cfg, Eigen::Index in, Eigen::Index out) {
  MlpSpec s;
  s.input_dim = static_cast<int>(in);
  s.hidden = cfg.model.var_hidden;
  s.activation = cfg.model.activation;
  s.heads = {{"alpha", static_cast<int>(out), Link::kSoftplus},
             {"lambda", static_cast<int>(out), Link::kSoftplus}};
  return s;
}

Scaler identity_scaler(Eigen::Index in, Eigen::Index out) {
  Scaler s;
  s.x_mean = Vector::Zero(in);
  s.x_std = Vector::Ones(in);
  s.y_mean = Vector::Zero(out);
  s.y_std = Vector::Ones(out);
  return s;
}

Matrix scale_x(const Scaler& s, const Matrix& x) {
  Matrix out = x;
  for (Eigen::Index c = 0; c < out.cols(); ++c)
    out.col(c) = (out.col(c).array() - s.x_mean[c]) / s.x_std[c];
  return out;
}

ParamVector average_params(const std::vector<ParamVector>& samples) {
  ParamVector acc = ParamVector::Zero(samples.front().size());
  for (const ParamVector& s : samples) acc += s;
  return acc / static_cast<double>(samples.size());
}

// Everything a fitted method hands to the evaluation stage.
struct Fitted {
  std::function<Predictions(const Matrix& x_scaled)> predict;
  std::vector<double> lmglk_trace;
  int selected_round = -1;
  ParamVector primary_params;               // the net, or the posterior mean
  std::optional<ParamVector> noise_params;  // bnn_ve
  std::vector<ParamVector> member_params;   // ensembles: every member
};

Fitted fit_method(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& train_s,
                  const Dataset* val_s) {
  const Eigen::Index in = train_s.input_dim();
  const Eigen::Index out = train_s.output_dim();
  Fitted f;
  TrainConfig tcfg = cfg.training;
  tcfg.seed = derive_seed(seed, kStreamTrain);

  switch (cfg.method.kind) {
    case Method::kMeMse: {
      MlpSpec spec = mean_spec_for(cfg, in, out);
      MseObjective obj;
      ParamVector params = train_map(spec, train_s, obj, tcfg, val_s);
      PosteriorEnsemble ens;
      ens.spec = spec;
      ens.samples = {params};
      ens.provenance = Provenance::kEnsemble;
      f.primary_params = params;
      f.predict = [ens](const Matrix& x) { return posterior_predictive(ens, 0.0, x); };
      break;
    }
    case Method::kMveBetaNll: {
      MlpSpec spec = mve_spec_for(cfg, in, out);
      BetaNllObjective obj(cfg.method.beta);
      ParamVector params = train_map(spec, train_s, obj, tcfg, val_s);
      PosteriorEnsemble ens;
      ens.spec = spec;
      ens.samples = {params};
      ens.provenance = Provenance::kEnsemble;
      f.primary_params = params;
      f.predict = [ens](const Matrix& x) { return posterior_predictive(ens, x); };
      break;
    }
    case Method::kMveEnsemble: {
      MlpSpec spec = mve_spec_for(cfg, in, out);
      BetaNllObjective obj(cfg.method.beta);
      std::vector<std::uint64_t> member_seeds;
      for (int i = 0; i < cfg.method.members; ++i)
        member_seeds.push_back(derive_seed(seed, kStreamMember + static_cast<std::uint64_t>(i)));
      PosteriorEnsemble ens = train_ensemble(spec, train_s, obj, tcfg, member_seeds);
      f.member_params = ens.samples;
      f.primary_params = average_params(ens.samples);
      f.predict = [ens](const Matrix& x) { return posterior_predictive(ens, x); };
      break;
    }
    case Method::kMveMcDropout: {
      MlpSpec spec = mve_spec_for(cfg, in, out);
      BetaNllObjective obj(cfg.method.beta);
      ParamVector params = train_map(spec, train_s, obj, tcfg, val_s);
      PosteriorEnsemble ens;
      ens.spec = spec;
      ens.samples = {params};
      ens.provenance = Provenance::kMcDropout;
      ens.mc_passes = cfg.method.passes;
      ens.mc_seed = derive_seed(seed, kStreamPasses);
      f.primary_params = params;
      f.predict = [ens](const Matrix& x) { return posterior_predictive(ens, x); };
      break;
    }
    case Method::kBnnEndToEnd: {
      PsgldConfig scfg = cfg.sampler;
      scfg.seed = derive_seed(seed, kStreamPosterior);
      if (cfg.method.fixed_variance.has_value()) {
        const double fv = *cfg.method.fixed_variance;
        MlpSpec spec = mean_spec_for(cfg, in, out);
        ParamVector init = init_params(spec, derive_seed(seed, kStreamTrain));
        Matrix var = Matrix::Constant(1, 1, fv);
        PosteriorEnsemble ens = sample_psgld(spec, init, train_s, var, cfg.prior, scfg);
        f.primary_params = average_params(ens.samples);
        f.predict = [ens, fv](const Matrix& x) { return posterior_predictive(ens, fv, x); };
      } else {
        MlpSpec spec = mve_spec_for(cfg, in, out);
        ParamVector init = init_params(spec, derive_seed(seed, kStreamTrain));
        BetaNllObjective nll(0.0);
        PosteriorEnsemble ens = sample_psgld(spec, init, train_s, nll, cfg.prior, scfg);
        f.primary_params = average_params(ens.samples);
        f.predict = [ens](const Matrix& x) { return posterior_predictive(ens, x); };
      }
      break;
    }
    case Method::kBnnVe: {
      CoopConfig cc;
      cc.iterations = cfg.coop_iterations;
      cc.mean_spec = mean_spec_for(cfg, in, out);
      cc.var_spec = noise_spec_for(cfg, in, out);
      cc.mean_cfg = tcfg;
      cc.var_cfg = cfg.variance_training;
      cc.var_cfg.seed = derive_seed(seed, kStreamNoiseFit);
      cc.bnn_cfg = cfg.sampler;
      cc.bnn_cfg.seed = derive_seed(seed, kStreamPosterior);
      cc.bbb_cfg = cfg.bbb;
      cc.bbb_cfg.seed = derive_seed(seed, kStreamPosterior);
      cc.prior = cfg.prior;
      cc.initial_variance = cfg.initial_variance;
      cc.inference = cfg.method.inference;
      cc.mc_passes = cfg.method.passes;
      CoopResult res = coop_train(train_s, cc);
      for (const CoopIteration& it : res.iterations) f.lmglk_trace.push_back(it.lmglk);
      f.selected_round = res.selected;
      const CoopIteration& best = res.best();
      PosteriorEnsemble ens = best.ensemble;
      MlpSpec vspec = cc.var_spec;
      ParamVector phi = best.var_params;
      f.primary_params = average_params(ens.samples);
      f.noise_params = phi;
      f.predict = [ens, vspec, phi](const Matrix& x) {
        return posterior_predictive(ens, vspec, phi, x);
      };
      break;
    }
  }
  return f;
}

void add_point_metrics(std::map<std::string, double>& out, const std::string& prefix,
                       const std::vector<std::string>& want, const Predictions& p,
                       const Matrix& targets, const Matrix* truth_var) {
  if (wants(want, "rmse")) out[prefix + "rmse"] = rmse(p, targets);
  if (wants(want, "mae")) out[prefix + "mae"] = mae(p, targets);
  if (wants(want, "tll")) out[prefix + "tll"] = tll(p, targets);
  if (wants(want, "epistemic_tll"))
    out[prefix + "epistemic_tll"] = tll(p, targets, TllVariance::kEpistemic);
  if (wants(want, "wasserstein") && truth_var != nullptr)
    out[prefix + "wasserstein"] = wasserstein(p, targets, *truth_var);
  if (wants(want, "epistemic_mean")) out[prefix + "epistemic_mean"] = p.epistemic_var.mean();
}

void write_plot_csv(const std::string& path, const Dataset& grid, const Predictions& p) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << std::setprecision(17);
  os << "x,truth_mean,truth_std,pred_mean,aleatoric_std,epistemic_std\n";
  for (Eigen::Index i = 0; i < grid.n(); ++i) {
    os << grid.x(i, 0) << ',' << (*grid.truth_mean)(i, 0) << ','
       << std::sqrt((*grid.truth_noise_var)(i, 0)) << ',' << p.mean(i, 0) << ','
       << std::sqrt(p.aleatoric_var(i, 0)) << ',' << std::sqrt(p.epistemic_var(i, 0)) << '\n';
  }
}

json params_to_json(const ParamVector& p) {
  json a = json::array();
  for (Eigen::Index i = 0; i < p.size(); ++i) a.push_back(p[i]);
  return a;
}

SeedResult run_one_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedResult result;
  result.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const DatasetConfig& dc = cfg.dataset;
    const bool generator = dc.source != DataSource::kCsv;
    const bool hetero = dc.source == DataSource::kHeteroscedastic;

    Dataset raw;
    if (dc.source == DataSource::kHeteroscedastic)
      raw = gen_heteroscedastic(dc.n, dc.x_low, dc.x_high, derive_seed(seed, kStreamData));
    else if (dc.source == DataSource::kHomoscedastic)
      raw = gen_homoscedastic(dc.n, dc.x_low, dc.x_high, derive_seed(seed, kStreamData));
    else
      raw = load_csv(dc.csv_path, dc.target_columns, dc.header);

    SplitSpec sp;
    sp.train_fraction = dc.train_fraction;
    sp.val_fraction = dc.val_fraction;
    sp.seed = derive_seed(seed, kStreamSplit);
    SplitResult parts = split(raw, sp);
    if (parts.train.n() < 2) throw std::runtime_error("train split has fewer than two rows");

    Scaler sc = dc.standardize ? fit_scaler(parts.train)
                               : identity_scaler(raw.input_dim(), raw.output_dim());
    Dataset train_s = apply_scaler(sc, parts.train);
    std::optional<Dataset> val_s;
    if (parts.val.n() > 0) val_s = apply_scaler(sc, parts.val);

    Fitted fit = fit_method(cfg, seed, train_s, val_s.has_value() ? &*val_s : nullptr);
    result.lmglk_trace = fit.lmglk_trace;
    result.selected_round = fit.selected_round;

    auto predict_orig = [&](const Matrix& x_orig) {
      return unscale_predictions(sc, fit.predict(scale_x(sc, x_orig)));
    };

    const std::vector<std::string> want = resolve_metrics(cfg);

    std::optional<Dataset> grid_in, grid_ex;
    std::optional<Predictions> pred_in, pred_ex;
    if (generator) {
      grid_in = synthetic_grid_in_support(hetero);
      grid_ex = synthetic_grid_extrapolation(hetero);
      pred_in = predict_orig(grid_in->x);
      pred_ex = predict_orig(grid_ex->x);
      add_point_metrics(result.metrics, "", want, *pred_in, *grid_in->truth_mean,
                        &*grid_in->truth_noise_var);
      add_point_metrics(result.metrics, "extrapolation_", want, *pred_ex, *grid_ex->truth_mean,
                        &*grid_ex->truth_noise_var);
      if (wants(want, "coverage")) {
        Dataset cval, ctest;
        if (hetero) {
          cval = gen_heteroscedastic(cfg.conformal_points, dc.x_low, dc.x_high,
                                     derive_seed(seed, kStreamConformalVal));
          ctest = gen_heteroscedastic(cfg.conformal_points, dc.x_low, dc.x_high,
                                      derive_seed(seed, kStreamConformalTest));
        } else {
          cval = gen_homoscedastic(cfg.conformal_points, dc.x_low, dc.x_high,
                                   derive_seed(seed, kStreamConformalVal));
          ctest = gen_homoscedastic(cfg.conformal_points, dc.x_low, dc.x_high,
                                    derive_seed(seed, kStreamConformalTest));
        }
        ConformalCalibration cal =
            conformal_calibrate(predict_orig(cval.x), cval.y, cfg.conformal_alpha);
        CoverageReport rep = conformal_coverage(cal, predict_orig(ctest.x), ctest.y);
        result.metrics["coverage"] = rep.coverage;
        result.metrics["interval_length"] = rep.mean_interval_length;
      }
    } else {
      if (parts.test.n() < 1) throw std::runtime_error("test split is empty");
      Predictions ptest = predict_orig(parts.test.x);
      add_point_metrics(result.metrics, "", want, ptest, parts.test.y, nullptr);
      if (wants(want, "coverage")) {
        ConformalCalibration cal =
            conformal_calibrate(predict_orig(parts.val.x), parts.val.y, cfg.conformal_alpha);
        CoverageReport rep = conformal_coverage(cal, ptest, parts.test.y);
        result.metrics["coverage"] = rep.coverage;
        result.metrics["interval_length"] = rep.mean_interval_length;
      }
    }

    if (!cfg.output_dir.empty()) {
      namespace fs = std::filesystem;
      fs::path dir = fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed));
      fs::create_directories(dir);
      if (generator) {
        write_plot_csv((dir / "plot_in_support.csv").string(), *grid_in, *pred_in);
        write_plot_csv((dir / "plot_extrapolation.csv").string(), *grid_ex, *pred_ex);
      }
      json pj;
      pj["seed"] = seed;
      pj["primary"] = params_to_json(fit.primary_params);
      if (fit.noise_params.has_value()) pj["noise"] = params_to_json(*fit.noise_params);
      if (!fit.member_params.empty()) {
        json members = json::array();
        for (const ParamVector& m : fit.member_params) members.push_back(params_to_json(m));
        pj["members"] = members;
      }
      std::ofstream os(dir / "params.json");
      if (!os) throw std::runtime_error("cannot write params.json");
      os << pj.dump(2) << '\n';
    }

    result.ok = true;
  } catch (const std::exception& e) {
    result.ok = false;
    result.error = e.what();
    result.metrics.clear();
  }
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// runner, report, compare

RunReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  RunReport report;
  report.artifact_version = "1";
  report.config = cfg;
  report.seeds.resize(cfg.seeds.size());

  if (cfg.parallel > 1 && cfg.seeds.size() > 1) {
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
      for (std::size_t i = next.fetch_add(1); i < cfg.seeds.size(); i = next.fetch_add(1))
        report.seeds[i] = run_one_seed(cfg, cfg.seeds[i]);
    };
    std::vector<std::thread> pool;
    const std::size_t n_workers =
        std::min<std::size_t>(static_cast<std::size_t>(cfg.parallel), cfg.seeds.size());
    pool.reserve(n_workers);
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  } else {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
      report.seeds[i] = run_one_seed(cfg, cfg.seeds[i]);
  }

  std::map<std::string, std::vector<double>> columns;
  for (const SeedResult& s : report.seeds)
    if (s.ok)
      for (const auto& [name, value] : s.metrics) columns[name].push_back(value);
  for (const auto& [name, values] : columns) {
    Aggregate a;
    a.count = static_cast<int>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    a.mean = mean;
    a.stddev = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
    report.aggregate[name] = a;
  }

  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    std::ofstream os(std::filesystem::path(cfg.output_dir) / "report.json");
    if (!os) throw std::runtime_error("cannot write report.json");
    os << report_json(report) << '\n';
  }
  return report;
}

std::string report_json(const RunReport& report) {
  json j;
  j["artifact_version"] = report.artifact_version;
  j["config"] = json::parse(config_json(report.config));
  json seeds = json::array();
  for (const SeedResult& s : report.seeds) {
    json e;
    e["seed"] = s.seed;
    e["ok"] = s.ok;
    if (!s.ok) e["error"] = s.error;
    e["wall_seconds"] = s.wall_seconds;
    e["metrics"] = s.metrics;
    if (!s.lmglk_trace.empty()) {
      e["lmglk_trace"] = s.lmglk_trace;
      e["selected_round"] = s.selected_round;
    }
    seeds.push_back(e);
  }
  j["seeds"] = seeds;
  json agg;
  for (const auto& [name, a] : report.aggregate)
    agg[name] = {{"mean", a.mean}, {"std", a.stddev}, {"count", a.count}};
  j["aggregate"] = agg;
  return j.dump(2);
}

RunReport parse_report(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("report is not valid JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("config") || !j.contains("seeds") || !j.contains("aggregate"))
    throw ConfigError("report: missing config, seeds, or aggregate");
  RunReport r;
  r.artifact_version = j.value("artifact_version", std::string("1"));
  r.config = parse_config(j.at("config").dump());
  for (const auto& e : j.at("seeds")) {
    SeedResult s;
    s.seed = e.at("seed").get<std::uint64_t>();
    s.ok = e.at("ok").get<bool>();
    if (e.contains("error")) s.error = e.at("error").get<std::string>();
    s.wall_seconds = e.value("wall_seconds", 0.0);
    if (e.contains("metrics"))
      for (const auto& [name, v] : e.at("metrics").items()) s.metrics[name] = v.get<double>();
    if (e.contains("lmglk_trace")) {
      for (const auto& v : e.at("lmglk_trace")) s.lmglk_trace.push_back(v.get<double>());
      s.selected_round = e.value("selected_round", -1);
    }
    r.seeds.push_back(std::move(s));
  }
  for (const auto& [name, a] : j.at("aggregate").items()) {
    Aggregate agg;
    agg.mean = a.at("mean").get<double>();
    agg.stddev = a.at("std").get<double>();
    agg.count = a.at("count").get<int>();
    r.aggregate[name] = agg;
  }
  return r;
}

std::string compare_table(const std::vector<RunReport>& reports) {
  if (reports.empty()) throw std::invalid_argument("compare: no reports");

  std::set<std::string> shared;
  for (const auto& [name, a] : reports.front().aggregate) shared.insert(name);
  for (const RunReport& r : reports) {
    std::set<std::string> keep;
    for (const std::string& name : shared)
      if (r.aggregate.count(name) > 0) keep.insert(name);
    shared = std::move(keep);
  }
  if (shared.empty()) throw std::invalid_argument("compare: the reports share no metrics");

  // Smaller score = better. Log-likelihoods flip sign, coverage counts its
  // distance from the nominal level, everything else is lower-is-better.
  auto score = [](const std::string& metric, double value, const RunReport& r) {
    if (metric.find("tll") != std::string::npos) return -value;
    if (metric == "coverage") return std::abs(value - (1.0 - r.config.conformal_alpha));
    return value;
  };

  std::vector<std::string> names;
  for (const RunReport& r : reports) names.push_back(r.config.name);

  std::vector<std::vector<std::string>> cells;  // rows x (1 + reports)
  std::vector<std::string> header = {"metric"};
  header.insert(header.end(), names.begin(), names.end());
  cells.push_back(header);

  for (const std::string& metric : shared) {
    std::vector<double> scores;
    for (const RunReport& r : reports)
      scores.push_back(score(metric, r.aggregate.at(metric).mean, r));
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
      if (scores[i] < scores[best]) best = i;
    std::size_t second = scores.size();
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (i == best) continue;
      if (second == scores.size() || scores[i] < scores[second]) second = i;
    }
    std::vector<std::string> row = {metric};
    for (std::size_t i = 0; i < reports.size(); ++i) {
      const Aggregate& a = reports[i].aggregate.at(metric);
      std::ostringstream c;
      c << std::setprecision(4) << a.mean << " +- " << std::setprecision(2) << a.stddev;
      if (reports.size() > 1) {
        if (i == best)
          c << " *";
        else if (i == second)
          c << " +";
      }
      row.push_back(c.str());
    }
    cells.push_back(row);
  }

  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (std::size_t rix = 0; rix < cells.size(); ++rix) {
    const auto& row = cells[rix];
    for (std::size_t c = 0; c < row.size(); ++c) {
      os << std::left << std::setw(static_cast<int>(width[c]) + 2) << row[c];
    }
    os << '\n';
    if (rix == 0) {
      for (std::size_t c = 0; c < row.size(); ++c)
        os << std::string(width[c], '-') << "  ";
      os << '\n';
    }
  }
  if (reports.size() > 1) os << "(* best, + second best per row)\n";
  return os.str();
}

void write_generated_csv(const std::string& path, DataSource source, int n, double x_low,
                         double x_high, std::uint64_t seed, bool include_truth) {
  Dataset ds;
  if (source == DataSource::kHeteroscedastic)
    ds = gen_heteroscedastic(n, x_low, x_high, seed);
  else if (source == DataSource::kHomoscedastic)
    ds = gen_homoscedastic(n, x_low, x_high, seed);
  else
    throw std::invalid_argument("write_generated_csv: source must be a generator");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << std::setprecision(17);
  os << "x,y";
  if (include_truth) os << ",truth_mean,truth_noise_var";
  os << '\n';
  for (Eigen::Index i = 0; i < ds.n(); ++i) {
    os << ds.x(i, 0) << ',' << ds.y(i, 0);
    if (include_truth) os << ',' << (*ds.truth_mean)(i, 0) << ',' << (*ds.truth_noise_var)(i, 0);
    os << '\n';
  }
}

}  // namespace coopuq
