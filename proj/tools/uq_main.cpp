#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "coopuq/experiment.hpp"
#include "json.hpp"

namespace {

// Exit codes: 0 success, 1 every seed failed, 2 bad input or I/O.

int emit_error(const std::string& kind, const std::string& message) {
  nlohmann::json e{{"error", {{"kind", kind}, {"message", message}}}};
  std::cerr << e.dump(2) << std::endl;
  return 2;
}

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

int cmd_run(const std::string& config_path, const std::string& output_dir,
            const std::vector<std::uint64_t>& seeds, int parallel) {
  coopuq::ExperimentConfig cfg;
  try {
    cfg = coopuq::parse_config(read_file(config_path));
  } catch (const coopuq::ConfigError& e) {
    return emit_error("config", e.what());
  } catch (const std::exception& e) {
    return emit_error("io", e.what());
  }
  if (!output_dir.empty()) cfg.output_dir = output_dir;
  if (!seeds.empty()) cfg.seeds = seeds;
  if (parallel > 0) cfg.parallel = parallel;

  coopuq::RunReport report;
  try {
    report = coopuq::run_experiment(cfg);
  } catch (const std::exception& e) {
    return emit_error("run", e.what());
  }

  int ok = 0;
  for (const coopuq::SeedResult& s : report.seeds) {
    if (s.ok) {
      ++ok;
      std::cout << "seed " << s.seed << ": ok (" << s.wall_seconds << "s)";
      if (!s.lmglk_trace.empty()) std::cout << ", selected round " << s.selected_round + 1;
      std::cout << '\n';
    } else {
      std::cout << "seed " << s.seed << ": FAILED: " << s.error << '\n';
    }
  }
  if (ok > 0) std::cout << '\n' << coopuq::compare_table({report});
  if (!cfg.output_dir.empty())
    std::cout << "report written to " << cfg.output_dir << "/report.json\n";
  if (ok == 0) {
    emit_error("run", "every seed failed");
    return 1;
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& paths) {
  std::vector<coopuq::RunReport> reports;
  try {
    for (const std::string& p : paths) reports.push_back(coopuq::parse_report(read_file(p)));
    std::cout << coopuq::compare_table(reports);
  } catch (const std::exception& e) {
    return emit_error("compare", e.what());
  }
  return 0;
}

int cmd_gen_data(const std::string& source, int n, double low, double high, std::uint64_t seed,
                 const std::string& out, bool no_truth) {
  coopuq::DataSource src;
  if (source == "heteroscedastic")
    src = coopuq::DataSource::kHeteroscedastic;
  else if (source == "homoscedastic")
    src = coopuq::DataSource::kHomoscedastic;
  else
    return emit_error("gen-data", "unknown generator '" + source + "'");
  try {
    coopuq::write_generated_csv(out, src, n, low, high, seed, !no_truth);
  } catch (const std::exception& e) {
    return emit_error("gen-data", e.what());
  }
  std::cout << "wrote " << n << " rows to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Regression uncertainty experiments: cooperative BNN training and baselines"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Train and evaluate an experiment config");
  std::string config_path;
  run->add_option("config", config_path, "JSON experiment config")
      ->required()
      ->check(CLI::ExistingFile);
  std::string output_dir;
  run->add_option("--output-dir", output_dir, "Write report.json and per-seed files here");
  std::vector<std::uint64_t> seeds;
  run->add_option("--seeds", seeds, "Override the config's seed list")->delimiter(',');
  int parallel = 0;
  run->add_option("--parallel", parallel, "Worker threads across seeds");

  auto* compare = app.add_subcommand("compare", "Tabulate reports side by side");
  std::vector<std::string> report_paths;
  compare->add_option("reports", report_paths, "report.json files")
      ->required()
      ->check(CLI::ExistingFile);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic draw as CSV");
  std::string source;
  gen->add_option("generator", source, "heteroscedastic or homoscedastic")->required();
  int n = 500;
  gen->add_option("--n", n, "Rows to draw")->check(CLI::PositiveNumber);
  double low = 0.0, high = 10.0;
  gen->add_option("--low", low, "Lower input bound");
  gen->add_option("--high", high, "Upper input bound");
  std::uint64_t seed = 0;
  gen->add_option("--seed", seed, "Generator seed");
  std::string out;
  gen->add_option("--out", out, "Output CSV path")->required();
  bool no_truth = false;
  gen->add_flag("--no-truth", no_truth, "Omit the ground-truth columns");

  CLI11_PARSE(app, argc, argv);

  if (*run) return cmd_run(config_path, output_dir, seeds, parallel);
  if (*compare) return cmd_compare(report_paths);
  return cmd_gen_data(source, n, low, high, seed, out, no_truth);
}
