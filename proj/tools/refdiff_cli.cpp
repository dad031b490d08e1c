#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "refdiff/errors.hpp"
#include "refdiff/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitAssumption = 3;
constexpr int kExitDivergence = 4;

struct Options {
  std::vector<std::string> configs;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs;
  std::optional<std::string> out;
  std::size_t jobs = 1;
  bool allow_divergence = false;
  bool override_assumption1 = false;
};

refdiff::ExperimentConfig load(const std::string& path, const Options& opts) {
  refdiff::ExperimentConfig cfg = refdiff::load_config(path);
  if (opts.seed) {
    cfg.seed = *opts.seed;
    cfg.topology.seed = *opts.seed;
  }
  if (opts.runs) cfg.runs = *opts.runs;
  cfg.validate();
  return cfg;
}

int run(const Options& opts) {
  if (opts.configs.size() != 1) {
    std::cerr << "error: run takes exactly one --config\n";
    return kExitConfig;
  }
  const refdiff::ExperimentConfig cfg = load(opts.configs.front(), opts);
  const std::filesystem::path out = opts.out ? *opts.out : cfg.output;
  const refdiff::SweepResult result =
      refdiff::run_config(cfg, {opts.jobs, opts.override_assumption1}, out);
  std::cout << refdiff::format_summary_table(result);
  std::cout << "wrote " << (out / "trace.csv").string() << '\n';
  if (result.any_divergence()) {
    std::cerr << "divergence detected in at least one run\n";
    if (!opts.allow_divergence) return kExitDivergence;
  }
  return kExitOk;
}

int compare(const Options& opts) {
  if (opts.configs.empty()) {
    std::cerr << "error: compare needs at least one --config\n";
    return kExitConfig;
  }
  std::vector<refdiff::ExperimentConfig> cfgs;
  for (const auto& path : opts.configs) cfgs.push_back(load(path, opts));
  const auto rows = refdiff::compare_rules(cfgs, {opts.jobs, opts.override_assumption1});
  std::cout << refdiff::format_comparison_table(rows);
  for (const auto& row : rows) {
    if (!std::isfinite(row.steady_state_msd)) {
      std::cerr << "divergence detected for rule " << row.rule << '\n';
      if (!opts.allow_divergence) return kExitDivergence;
      break;
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robust diffusion learning experiments"};
  Options opts;
  app.add_option("--config", opts.configs, "Experiment config (JSON); repeat for compare")->required();
  app.add_option("--seed", opts.seed, "Override the master seed");
  app.add_option("--runs", opts.runs, "Override the Monte-Carlo run count")->check(CLI::PositiveNumber);
  app.add_option("--out", opts.out, "Output directory (default: config output)");
  app.add_option("--jobs", opts.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--allow-divergence", opts.allow_divergence, "Exit 0 even if a run diverges");
  app.add_flag("--override-assumption1", opts.override_assumption1,
               "Run cells that violate the contamination assumption");
  auto* run_cmd = app.add_subcommand("run", "Run one config (default)")->fallthrough();
  auto* compare_cmd = app.add_subcommand("compare", "Compare configs that differ only in aggregator")->fallthrough();
  app.require_subcommand(0, 1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  (void)run_cmd;

  try {
    return compare_cmd->parsed() ? compare(opts) : run(opts);
  } catch (const refdiff::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const refdiff::AssumptionViolation& e) {
    std::cerr << "assumption violation: " << e.what() << '\n'
              << "rerun with --override-assumption1 to simulate anyway\n";
    return kExitAssumption;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}
