#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coopuq/coop.hpp"
#include "coopuq/metrics.hpp"

namespace coopuq {

enum class Method {
  kMeMse,         // mean-only network on squared error
  kMveBetaNll,    // mean+variance network on the beta-weighted Gaussian NLL
  kMveEnsemble,   // independently trained mean+variance networks
  kMveMcDropout,  // one mean+variance network, stochastic passes at prediction
  kBnnEndToEnd,   // weight posterior over a network that models its own noise
  kBnnVe,         // cooperative mean / noise-network / weight-posterior loop
};

std::string to_string(Method m);

enum class DataSource { kHeteroscedastic, kHomoscedastic, kCsv };

struct DatasetConfig {
  DataSource source = DataSource::kHeteroscedastic;
  int n = 500;
  double x_low = 0.0;
  double x_high = 10.0;
  std::string csv_path;
  std::vector<int> target_columns;
  bool header = true;
  double train_fraction = 0.8;
  double val_fraction = 0.0;
  bool standardize = true;
};

struct MethodConfig {
  Method kind = Method::kBnnVe;
  double beta = 0.0;  // mve_beta_nll weight; 0 is the plain Gaussian NLL
  int members = 5;    // mve_ensemble size
  int passes = 100;   // stochastic forwards for the dropout methods
  CoopInference inference = CoopInference::kPsgld;  // bnn_ve posterior
  // When set, bnn_end_to_end drops the variance head and samples a mean-only
  // network under this constant noise (the homoscedastic-noise sweep runs as
  // a series of configs over this value).
  std::optional<double> fixed_variance;
};

struct ModelConfig {
  std::vector<int> hidden = {256, 256};
  Activation activation = Activation::kTanh;
  double dropout_rate = 0.0;
  std::vector<int> var_hidden = {5};  // bnn_ve noise network
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig dataset;
  MethodConfig method;
  ModelConfig model;
  TrainConfig training;           // deterministic fits (mean or MVE network)
  TrainConfig variance_training;  // bnn_ve noise network
  PsgldConfig sampler;
  BbbConfig bbb;
  PriorSpec prior;
  int coop_iterations = 2;
  double initial_variance = 1.0;
  std::vector<std::uint64_t> seeds = {1};
  // Metric names to report; empty selects the method's defaults. Known names:
  // rmse, mae, tll, epistemic_tll, wasserstein, epistemic_mean, coverage.
  std::vector<std::string> metrics;
  double conformal_alpha = 0.1;
  int conformal_points = 1000;  // per calibration and test set (generators)
  std::string output_dir;       // empty writes no files
  int parallel = 1;             // worker threads across seeds

  void validate() const;  // ConfigError with the offending field path
};

// Parse and validate a JSON config; unknown keys are rejected with their
// path. Per-seed randomness is derived from the entries of `seeds`, so the
// seed fields of nested training configs are not accepted.
ExperimentConfig parse_config(const std::string& json_text);

// The full config as canonical JSON with every default filled in. Parsing
// the echo reproduces the config exactly.
std::string config_json(const ExperimentConfig& cfg);

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;  // set when ok is false
  double wall_seconds = 0.0;
  std::map<std::string, double> metrics;
  std::vector<double> lmglk_trace;  // bnn_ve: per-round selection score
  int selected_round = -1;          // bnn_ve: 0-based argmax of the trace
};

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation over seeds
  int count = 0;
};

struct RunReport {
  std::string artifact_version;
  ExperimentConfig config;
  std::vector<SeedResult> seeds;
  std::map<std::string, Aggregate> aggregate;  // over succeeding seeds
};

// Train and evaluate every seed (failures recorded per seed, not fatal).
// With config.output_dir set, writes report.json plus per-seed parameter and
// plot files.
RunReport run_experiment(const ExperimentConfig& cfg);

std::string report_json(const RunReport& report);
RunReport parse_report(const std::string& json_text);

// Side-by-side table over the metrics every report shares (throws when the
// reports have none in common). Lower is better for error and distance
// metrics, higher for log-likelihoods, and coverage counts by closeness to
// its nominal level; the best and runner-up per row are flagged.
std::string compare_table(const std::vector<RunReport>& reports);

// Writes a generator draw as a CSV usable by the csv dataset source. Columns:
// x, y, then (with truth) truth_mean, truth_noise_var.
void write_generated_csv(const std::string& path, DataSource source, int n, double x_low,
                         double x_high, std::uint64_t seed, bool include_truth);

}  // namespace coopuq
