#pragma once

// Declarative experiments: a JSON config describes task, network, rule,
// attack and an optional sweep axis; run_sweep executes every
// (cell, Monte-Carlo run) pair and the writers persist the results.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "refdiff/aggregate.hpp"
#include "refdiff/network.hpp"
#include "refdiff/simulate.hpp"

namespace refdiff {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr std::string_view kTraceCsvHeader =
    "sweep_value,run,iteration,msd,malicious_weight_mass,assumption_ok";

/// Invalid config; `path` names the offending field, e.g. "aggregator.rule".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& what)
      : std::runtime_error(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

enum class SweepAxis { None, Strength, Rate };
enum class TargetKind { Random, Ones, Explicit };

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;

  std::size_t dimension = 10;
  double noise_variance = 0.01;
  TargetKind target = TargetKind::Random;
  std::vector<double> target_values;  // Explicit only
  /// Standard deviation of per-agent offsets added to w_true.
  double heterogeneity = 0.0;

  TopologySpec topology;
  std::size_t agents = 32;
  AggregatorSpec aggregator;
  AttackSpec attack;
  /// Malicious agent count for the None and Strength axes; agents
  /// 0 .. malicious-1 are the malicious ones.
  std::size_t malicious = 0;
  double epsilon = 0.45;

  double step_size = 0.01;
  std::size_t iterations = 2000;
  std::size_t runs = 5;
  std::uint64_t seed = 0;

  SweepAxis axis = SweepAxis::None;
  /// Attack strengths (Strength) or malicious fractions of K (Rate).
  std::vector<double> sweep_values;
  std::string output = "out";

  /// Throws ConfigError on any invariant violation.
  void validate() const;
};

/// Parses and validates. Unknown keys are errors; `seed` and
/// `schema_version` are required.
ExperimentConfig parse_config(std::string_view json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string to_json(const ExperimentConfig& cfg);

/// Strength {0, 1, 10, 100, 1000, 10000}; rate {0/K .. floor((K-1)/2)/K}.
std::vector<double> default_sweep_values(SweepAxis axis, std::size_t agents);

/// The w_true and optional per-agent minimizers drawn for this config.
LinearModelTask make_task(const ExperimentConfig& cfg);

struct SweepCell {
  double sweep_value = 0.0;
  std::size_t malicious_count = 0;
  AttackSpec attack;
  Assumption1Report assumption;
};

/// Expands the sweep axis into cells (a single cell for SweepAxis::None).
std::vector<SweepCell> expand_cells(const ExperimentConfig& cfg);

struct CellResult {
  SweepCell cell;
  std::vector<Trace> runs;
  double steady_state_msd = 0.0;
  double malicious_weight_mass = 0.0;
  bool diverged = false;
};

struct SweepResult {
  ExperimentConfig config;
  std::vector<CellResult> cells;

  bool any_divergence() const;
};

struct RunOptions {
  std::size_t jobs = 1;
  bool override_assumption1 = false;
};

/// Runs every (cell, run) pair on up to `jobs` threads. Output does not
/// depend on the schedule. Throws AssumptionViolation before running
/// anything if some cell breaks the contamination assumption and no
/// override is set.
SweepResult run_sweep(const ExperimentConfig& cfg, const RunOptions& options = {});

void write_trace_csv(const SweepResult& result, std::ostream& out);
void write_summary_csv(const SweepResult& result, std::ostream& out);
std::string format_summary_table(const SweepResult& result);

/// run_sweep, then writes trace.csv, summary.csv and metadata.json (the only
/// file carrying a timestamp) under `out_dir`.
SweepResult run_config(const ExperimentConfig& cfg, const RunOptions& options,
                       const std::filesystem::path& out_dir);

struct SteadyStateRow {
  double sweep_value = 0.0;
  double msd = 0.0;
};

/// Recomputes per-cell steady-state MSD from a persisted trace CSV.
std::vector<SteadyStateRow> steady_state_from_csv(std::istream& in, double fraction = 0.1);

struct ComparisonRow {
  std::string rule;
  double steady_state_msd = 0.0;
  double ratio_to_baseline = 1.0;
};

/// Runs configs that differ only in their aggregator on shared seeds. The
/// baseline is the first Mean config, or the first config when none is
/// Mean. Throws ConfigError if anything but the aggregator differs.
std::vector<ComparisonRow> compare_rules(const std::vector<ExperimentConfig>& configs,
                                         const RunOptions& options = {});

std::string format_comparison_table(const std::vector<ComparisonRow>& rows);

}  // namespace refdiff
