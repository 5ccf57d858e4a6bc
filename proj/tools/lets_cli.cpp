// Command-line front end for twin experiments.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lets/lets.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> replicates;
  std::optional<int> threads;
  bool dump_ensembles = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "experiment configuration (JSON)");
  cmd->add_option("--preset", f.preset, "built-in configuration: lorenz63, mackey_glass, lorenz96");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--replicates", f.replicates, "number of replicate runs");
  cmd->add_option("--threads", f.threads, "worker threads for replicates");
  cmd->add_flag("--dump-ensembles", f.dump_ensembles, "write the analysed ensembles of replicate 0");
}

lets::ExperimentConfig resolve(const CommonFlags& f) {
  if (f.config.empty() == f.preset.empty()) throw lets::ConfigError("--config", "give exactly one of --config or --preset");
  lets::ExperimentConfig c = f.config.empty() ? lets::preset(f.preset) : lets::load_config(f.config);
  if (f.seed) c.run.seed = *f.seed;
  if (!f.out.empty()) c.output.dir = f.out;
  if (f.replicates) {
    if (*f.replicates < 1) throw lets::ConfigError("--replicates", "must be at least 1");
    c.run.replicates = *f.replicates;
  }
  if (f.threads) c.run.threads = *f.threads;
  if (f.dump_ensembles) c.output.dump_ensembles = true;
  return c;
}

std::vector<double> parse_values(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  for (std::string cell; std::getline(ss, cell, ',');) {
    try {
      out.push_back(std::stod(cell));
    } catch (const std::exception&) {
      throw lets::ConfigError("--values", "not a number: '" + cell + "'");
    }
  }
  if (out.empty()) throw lets::ConfigError("--values", "empty value list");
  return out;
}

void print_summary(const lets::ExperimentResult& r) {
  std::cout << r.config.smoother.label() << " M=" << r.config.run.members << " L=" << r.config.smoother.lag
            << " runs=" << r.summary.runs;
  if (r.summary.diverged) std::cout << " diverged=" << r.summary.diverged;
  std::cout << " rmse_mu=" << r.summary.rmse_mu.mean;
  if (r.summary.rmse_mode) std::cout << " rmse_mode=" << r.summary.rmse_mode->mean;
  std::cout << " crps=" << r.summary.crps.mean << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linear ensemble transform smoothers: twin experiments"};
  app.require_subcommand(1);

  CommonFlags truth_f, assim_f, sweep_f, auto_f;
  auto* truth = app.add_subcommand("truth", "generate the reference trajectory and observations");
  add_common(truth, truth_f);
  auto* assim = app.add_subcommand("assimilate", "run the configured smoother");
  add_common(assim, assim_f);
  auto* sw = app.add_subcommand("sweep", "run one experiment per parameter value");
  add_common(sw, sweep_f);
  std::string axis, values;
  sw->add_option("--axis", axis, "M, L, alpha, lambda or r_loc")->required();
  sw->add_option("--values", values, "comma-separated values")->required();
  auto* metrics = app.add_subcommand("metrics", "recompute summaries from a stored metrics table");
  std::string metrics_in, metrics_out;
  metrics->add_option("--in", metrics_in, "metrics.csv or sweep_metrics.csv")->required();
  metrics->add_option("--out", metrics_out, "summary CSV to write")->required();
  auto* autocorr = app.add_subcommand("autocorr", "build the autocorrelation table for localisation");
  add_common(autocorr, auto_f);
  std::string table_out;
  autocorr->add_option("--table", table_out, "output CSV (default <out>/autocorrelation.csv)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (truth->parsed()) {
      const auto c = resolve(truth_f);
      const auto setup = lets::make_twin_setup(c);
      lets::RngStream truth_rng = lets::RngStream(c.run.seed).split(0);
      lets::write_truth(c.output.dir, lets::generate_truth(setup, truth_rng));
      std::cout << "wrote " << (fs::path(c.output.dir) / "truth.csv").string() << '\n';
    } else if (assim->parsed()) {
      const auto c = resolve(assim_f);
      const auto result = lets::run_experiment(c);
      lets::write_experiment(result, c.output.dir);
      if (c.output.dump_ensembles) lets::dump_ensembles(c, fs::path(c.output.dir) / "ensembles.csv");
      print_summary(result);
    } else if (sw->parsed()) {
      const auto c = resolve(sweep_f);
      for (const auto& r : lets::sweep(c, axis, parse_values(values), c.output.dir)) print_summary(r);
    } else if (metrics->parsed()) {
      lets::recompute_summary(metrics_in, metrics_out);
      std::cout << "wrote " << metrics_out << '\n';
    } else if (autocorr->parsed()) {
      auto c = resolve(auto_f);
      c.localisation.enabled = true;
      c.localisation.scheme = lets::DistanceScheme::kAutocorrelation;
      c.localisation.table_path = table_out.empty() ? (fs::path(c.output.dir) / "autocorrelation.csv").string() : table_out;
      if (fs::exists(c.localisation.table_path)) fs::remove(c.localisation.table_path);
      const auto table = lets::build_autocorrelation(c);
      std::cout << "wrote " << c.localisation.table_path << " (T=" << table->series_length
                << ", max_tau=" << table->max_tau() << ")\n";
    }
  } catch (const lets::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const lets::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
