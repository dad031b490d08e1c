#include "refdiff/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "refdiff/errors.hpp"

namespace refdiff {
namespace {

using nlohmann::json;

std::string join(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

// Reads one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(path_, "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return node_.contains(key);
  }

  const json& at(const std::string& key) {
    seen_.insert(key);
    if (!node_.contains(key)) throw ConfigError(join(path_, key), "required field missing");
    return node_.at(key);
  }

  std::string path(const std::string& key) const { return join(path_, key); }

  double number(const std::string& key, double fallback) {
    if (!has(key)) return fallback;
    const json& v = node_.at(key);
    if (!v.is_number()) throw ConfigError(path(key), "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw ConfigError(path(key), "must be finite");
    return x;
  }

  std::uint64_t unsigned_integer(const std::string& key, std::uint64_t fallback) {
    if (!has(key)) return fallback;
    return as_unsigned(node_.at(key), path(key));
  }

  std::string text(const std::string& key, const std::string& fallback) {
    if (!has(key)) return fallback;
    const json& v = node_.at(key);
    if (!v.is_string()) throw ConfigError(path(key), "expected a string");
    return v.get<std::string>();
  }

  static std::uint64_t as_unsigned(const json& v, const std::string& where) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(where, "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(join(path_, it.key()), "unknown key");
    }
  }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

std::vector<double> number_array(const json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigError(where + "[" + std::to_string(i) + "]", "expected a number");
    const double x = v[i].get<double>();
    if (!std::isfinite(x)) throw ConfigError(where + "[" + std::to_string(i) + "]", "must be finite");
    out.push_back(x);
  }
  return out;
}

template <typename Enum>
Enum lookup(const std::map<std::string, Enum>& table, const std::string& name, const std::string& where) {
  const auto it = table.find(name);
  if (it == table.end()) {
    std::string options;
    for (const auto& [key, value] : table) options += (options.empty() ? "" : ", ") + key;
    throw ConfigError(where, "unknown value '" + name + "' (expected one of: " + options + ")");
  }
  return it->second;
}

template <typename Enum>
std::string reverse_lookup(const std::map<std::string, Enum>& table, Enum value) {
  for (const auto& [key, v] : table) {
    if (v == value) return key;
  }
  return "unknown";
}

const std::map<std::string, TopologyKind> kTopologyNames{
    {"fully_connected", TopologyKind::FullyConnected},
    {"ring", TopologyKind::Ring},
    {"erdos_renyi", TopologyKind::ErdosRenyi},
};
const std::map<std::string, AggregationRule> kRuleNames{
    {"mean", AggregationRule::Mean},
    {"median", AggregationRule::CoordinateMedian},
    {"trimmed_mean", AggregationRule::TrimmedMean},
    {"geometric_median", AggregationRule::GeometricMedian},
    {"m_estimator", AggregationRule::MEstimator},
    {"mm", AggregationRule::MMEstimator},
};
const std::map<std::string, LossFamily> kLossNames{
    {"squared", LossFamily::SquaredError},
    {"absolute", LossFamily::AbsoluteError},
    {"huber", LossFamily::Huber},
    {"tukey", LossFamily::TukeyBisquare},
};
const std::map<std::string, AttackKind> kAttackNames{
    {"none", AttackKind::None},
    {"additive_shift", AttackKind::AdditiveShift},
    {"sign_flip", AttackKind::SignFlip},
    {"value_replace", AttackKind::ValueReplace},
};
const std::map<std::string, SweepAxis> kAxisNames{
    {"none", SweepAxis::None},
    {"strength", SweepAxis::Strength},
    {"rate", SweepAxis::Rate},
};

double default_tuning(LossFamily family) {
  switch (family) {
    case LossFamily::Huber: return kHuberDefaultTuning;
    case LossFamily::TukeyBisquare: return kTukeyDefaultTuning;
    default: return 1.0;
  }
}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::size_t rate_to_count(double rate, std::size_t agents) {
  const double count = rate * static_cast<double>(agents);
  return static_cast<std::size_t>(std::llround(count));
}

}  // namespace

void ExperimentConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) {
    throw ConfigError("schema_version", "unsupported version " + std::to_string(schema_version));
  }
  if (dimension == 0) throw ConfigError("task.dimension", "must be at least 1");
  if (noise_variance < 0.0) throw ConfigError("task.noise_variance", "must be non-negative");
  if (target == TargetKind::Explicit && target_values.size() != dimension) {
    throw ConfigError("task.w_true", "explicit vector must have task.dimension entries");
  }
  if (heterogeneity < 0.0) throw ConfigError("task.heterogeneity", "must be non-negative");
  if (agents == 0) throw ConfigError("topology.agents", "must be at least 1");
  if (topology.kind == TopologyKind::ErdosRenyi &&
      !(topology.probability >= 0.0 && topology.probability <= 1.0)) {
    throw ConfigError("topology.probability", "must lie in [0, 1]");
  }
  try {
    aggregator.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError("aggregator", e.what());
  }
  try {
    attack.validate(dimension);
  } catch (const InvalidInput& e) {
    throw ConfigError("attack", e.what());
  }
  if (malicious >= agents) throw ConfigError("malicious", "must leave at least one benign agent");
  if (!(epsilon >= 0.0 && epsilon < 0.5)) throw ConfigError("epsilon", "must lie in [0, 0.5)");
  if (!(step_size > 0.0)) throw ConfigError("step_size", "must be positive");
  if (iterations == 0) throw ConfigError("iterations", "must be at least 1");
  if (runs == 0) throw ConfigError("runs", "must be at least 1");
  if (axis != SweepAxis::None && sweep_values.empty()) {
    throw ConfigError("sweep.values", "sweep needs at least one value");
  }
  for (std::size_t i = 0; i < sweep_values.size(); ++i) {
    const std::string where = "sweep.values[" + std::to_string(i) + "]";
    const double v = sweep_values[i];
    if (!std::isfinite(v)) throw ConfigError(where, "must be finite");
    if (axis == SweepAxis::Rate) {
      const double count = v * static_cast<double>(agents);
      if (v < 0.0 || std::abs(count - std::round(count)) > 1e-9) {
        throw ConfigError(where, "rate must be a non-negative multiple of 1/agents");
      }
      if (rate_to_count(v, agents) >= agents) throw ConfigError(where, "rate leaves no benign agent");
    }
  }
  if (axis == SweepAxis::Strength && attack.kind != AttackKind::AdditiveShift) {
    throw ConfigError("attack.kind", "a strength sweep needs an additive_shift attack");
  }
}

ExperimentConfig parse_config(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }

  ExperimentConfig cfg;
  ObjectReader top(root, "");
  {
    const json& v = top.at("schema_version");
    cfg.schema_version = static_cast<int>(ObjectReader::as_unsigned(v, "schema_version"));
    if (cfg.schema_version != kConfigSchemaVersion) {
      throw ConfigError("schema_version", "unsupported version " + std::to_string(cfg.schema_version));
    }
  }
  cfg.seed = ObjectReader::as_unsigned(top.at("seed"), "seed");

  if (top.has("task")) {
    ObjectReader task(root.at("task"), "task");
    cfg.dimension = task.unsigned_integer("dimension", cfg.dimension);
    cfg.noise_variance = task.number("noise_variance", cfg.noise_variance);
    cfg.heterogeneity = task.number("heterogeneity", cfg.heterogeneity);
    if (task.has("w_true")) {
      const json& w = root.at("task").at("w_true");
      if (w.is_string()) {
        const std::string name = w.get<std::string>();
        if (name == "random") {
          cfg.target = TargetKind::Random;
        } else if (name == "ones") {
          cfg.target = TargetKind::Ones;
        } else {
          throw ConfigError("task.w_true", "expected \"random\", \"ones\" or an array");
        }
      } else {
        cfg.target = TargetKind::Explicit;
        cfg.target_values = number_array(w, "task.w_true");
      }
    }
    task.finish();
  }

  if (top.has("topology")) {
    ObjectReader topo(root.at("topology"), "topology");
    cfg.topology.kind = lookup(kTopologyNames, topo.text("kind", "fully_connected"), topo.path("kind"));
    cfg.agents = topo.unsigned_integer("agents", cfg.agents);
    cfg.topology.probability = topo.number("probability", cfg.topology.probability);
    cfg.topology.seed = topo.unsigned_integer("seed", cfg.seed);
    topo.finish();
  } else {
    cfg.topology.seed = cfg.seed;
  }

  if (top.has("aggregator")) {
    ObjectReader agg(root.at("aggregator"), "aggregator");
    cfg.aggregator.rule = lookup(kRuleNames, agg.text("rule", "mm"), agg.path("rule"));
    LossFamily family = cfg.aggregator.rule == AggregationRule::Mean ? LossFamily::SquaredError
                                                                      : LossFamily::TukeyBisquare;
    if (agg.has("loss")) family = lookup(kLossNames, agg.text("loss", ""), agg.path("loss"));
    cfg.aggregator.loss = {family, agg.number("tuning", default_tuning(family))};
    cfg.aggregator.trim_fraction = agg.number("trim_fraction", cfg.aggregator.trim_fraction);
    cfg.aggregator.fixed_scale = agg.number("scale", cfg.aggregator.fixed_scale);
    cfg.aggregator.irls.max_iters =
        static_cast<int>(agg.unsigned_integer("max_iters", static_cast<std::uint64_t>(cfg.aggregator.irls.max_iters)));
    cfg.aggregator.irls.tol = agg.number("tol", cfg.aggregator.irls.tol);
    cfg.aggregator.irls.scale_floor = agg.number("scale_floor", cfg.aggregator.irls.scale_floor);
    agg.finish();
  }

  if (top.has("attack")) {
    ObjectReader attack(root.at("attack"), "attack");
    cfg.attack.kind = lookup(kAttackNames, attack.text("kind", "none"), attack.path("kind"));
    cfg.attack.delta = attack.number("delta", 0.0);
    cfg.attack.gain = attack.number("gain", 1.0);
    if (attack.has("replacement")) {
      const auto values = number_array(root.at("attack").at("replacement"), "attack.replacement");
      cfg.attack.replacement = Eigen::Map<const ModelVector>(values.data(), static_cast<Eigen::Index>(values.size()));
    }
    attack.finish();
  }

  cfg.malicious = top.unsigned_integer("malicious", cfg.malicious);
  cfg.epsilon = top.number("epsilon", cfg.epsilon);
  cfg.step_size = top.number("step_size", cfg.step_size);
  cfg.iterations = top.unsigned_integer("iterations", cfg.iterations);
  cfg.runs = top.unsigned_integer("runs", cfg.runs);
  cfg.output = top.text("output", cfg.output);

  if (top.has("sweep")) {
    ObjectReader sweep(root.at("sweep"), "sweep");
    cfg.axis = lookup(kAxisNames, sweep.text("axis", "none"), sweep.path("axis"));
    if (sweep.has("values")) {
      cfg.sweep_values = number_array(root.at("sweep").at("values"), "sweep.values");
    } else {
      cfg.sweep_values = default_sweep_values(cfg.axis, cfg.agents);
    }
    sweep.finish();
  }
  top.finish();

  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string to_json(const ExperimentConfig& cfg) {
  json root;
  root["schema_version"] = cfg.schema_version;
  root["seed"] = cfg.seed;
  json task{{"dimension", cfg.dimension},
            {"noise_variance", cfg.noise_variance},
            {"heterogeneity", cfg.heterogeneity}};
  switch (cfg.target) {
    case TargetKind::Random: task["w_true"] = "random"; break;
    case TargetKind::Ones: task["w_true"] = "ones"; break;
    case TargetKind::Explicit: task["w_true"] = cfg.target_values; break;
  }
  root["task"] = task;
  root["topology"] = {{"kind", reverse_lookup(kTopologyNames, cfg.topology.kind)},
                      {"agents", cfg.agents},
                      {"probability", cfg.topology.probability},
                      {"seed", cfg.topology.seed}};
  root["aggregator"] = {{"rule", reverse_lookup(kRuleNames, cfg.aggregator.rule)},
                        {"loss", reverse_lookup(kLossNames, cfg.aggregator.loss.family)},
                        {"tuning", cfg.aggregator.loss.tuning},
                        {"trim_fraction", cfg.aggregator.trim_fraction},
                        {"scale", cfg.aggregator.fixed_scale},
                        {"max_iters", cfg.aggregator.irls.max_iters},
                        {"tol", cfg.aggregator.irls.tol},
                        {"scale_floor", cfg.aggregator.irls.scale_floor}};
  json attack{{"kind", reverse_lookup(kAttackNames, cfg.attack.kind)},
              {"delta", cfg.attack.delta},
              {"gain", cfg.attack.gain}};
  if (cfg.attack.kind == AttackKind::ValueReplace) {
    attack["replacement"] = std::vector<double>(cfg.attack.replacement.data(),
                                                cfg.attack.replacement.data() + cfg.attack.replacement.size());
  }
  root["attack"] = attack;
  root["malicious"] = cfg.malicious;
  root["epsilon"] = cfg.epsilon;
  root["step_size"] = cfg.step_size;
  root["iterations"] = cfg.iterations;
  root["runs"] = cfg.runs;
  root["sweep"] = {{"axis", reverse_lookup(kAxisNames, cfg.axis)}, {"values", cfg.sweep_values}};
  root["output"] = cfg.output;
  return root.dump(2);
}

std::vector<double> default_sweep_values(SweepAxis axis, std::size_t agents) {
  switch (axis) {
    case SweepAxis::Strength:
      return {0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0};
    case SweepAxis::Rate: {
      std::vector<double> rates;
      const std::size_t max_count = agents == 0 ? 0 : (agents - 1) / 2;
      for (std::size_t c = 0; c <= max_count; ++c) {
        rates.push_back(static_cast<double>(c) / static_cast<double>(agents));
      }
      return rates;
    }
    case SweepAxis::None:
      break;
  }
  return {};
}

LinearModelTask make_task(const ExperimentConfig& cfg) {
  LinearModelTask task;
  task.dimension = cfg.dimension;
  task.noise_variance = cfg.noise_variance;
  const auto dim = static_cast<Eigen::Index>(cfg.dimension);
  switch (cfg.target) {
    case TargetKind::Ones:
      task.w_true = ModelVector::Ones(dim);
      break;
    case TargetKind::Explicit:
      task.w_true = Eigen::Map<const ModelVector>(cfg.target_values.data(), dim);
      break;
    case TargetKind::Random: {
      RandomStream rng(cfg.seed, 0, 0, RandomStream::Purpose::TaskSetup);
      task.w_true.resize(dim);
      for (Eigen::Index m = 0; m < dim; ++m) task.w_true[m] = rng.normal();
      break;
    }
  }
  if (cfg.heterogeneity > 0.0) {
    task.agent_w_true.reserve(cfg.agents);
    for (std::size_t k = 0; k < cfg.agents; ++k) {
      RandomStream rng(cfg.seed, 0, k + 1, RandomStream::Purpose::TaskSetup);
      ModelVector w = task.w_true;
      for (Eigen::Index m = 0; m < dim; ++m) w[m] += cfg.heterogeneity * rng.normal();
      task.agent_w_true.push_back(std::move(w));
    }
  }
  return task;
}

std::vector<SweepCell> expand_cells(const ExperimentConfig& cfg) {
  std::vector<SweepCell> cells;
  auto make_cell = [&](double value, std::size_t count, AttackSpec attack) {
    std::vector<std::size_t> malicious(count);
    for (std::size_t k = 0; k < count; ++k) malicious[k] = k;
    const Topology t = build_topology(cfg.topology, cfg.agents, malicious);
    cells.push_back({value, count, std::move(attack), validate_assumption1(t, cfg.epsilon)});
  };
  switch (cfg.axis) {
    case SweepAxis::None:
      make_cell(0.0, cfg.malicious, cfg.attack);
      break;
    case SweepAxis::Strength:
      for (double delta : cfg.sweep_values) {
        AttackSpec attack = cfg.attack;
        attack.delta = delta;
        make_cell(delta, cfg.malicious, attack);
      }
      break;
    case SweepAxis::Rate:
      for (double rate : cfg.sweep_values) make_cell(rate, rate_to_count(rate, cfg.agents), cfg.attack);
      break;
  }
  return cells;
}

bool SweepResult::any_divergence() const {
  return std::any_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.diverged; });
}

SweepResult run_sweep(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  SweepResult result;
  result.config = cfg;
  const auto cells = expand_cells(cfg);
  if (!options.override_assumption1) {
    for (const auto& cell : cells) {
      if (!cell.assumption.passed()) {
        throw AssumptionViolation("sweep value " + format_double(cell.sweep_value) + ": " +
                                  cell.assumption.describe());
      }
    }
  }

  const LinearModelTask task = make_task(cfg);
  std::vector<Topology> topologies;
  std::vector<CombinationMatrix> matrices;
  for (const auto& cell : cells) {
    std::vector<std::size_t> malicious(cell.malicious_count);
    for (std::size_t k = 0; k < cell.malicious_count; ++k) malicious[k] = k;
    topologies.push_back(build_topology(cfg.topology, cfg.agents, malicious));
    matrices.push_back(uniform_combination(topologies.back()));
  }

  result.cells.resize(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    result.cells[c].cell = cells[c];
    result.cells[c].runs.resize(cfg.runs);
  }

  const std::size_t total = cells.size() * cfg.runs;
  std::vector<std::exception_ptr> errors(total);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t job = next++; job < total; job = next++) {
      const std::size_t c = job / cfg.runs;
      const std::size_t r = job % cfg.runs;
      try {
        DiffusionSettings settings;
        settings.step_size = cfg.step_size;
        settings.iterations = cfg.iterations;
        settings.seed = cfg.seed;
        settings.run = r;
        settings.attack = cells[c].attack;
        settings.epsilon = cfg.epsilon;
        settings.override_assumption1 = true;  // checked above for the whole sweep
        result.cells[c].runs[r] = run_diffusion(task, topologies[c], matrices[c], cfg.aggregator, settings);
      } catch (...) {
        errors[job] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(options.jobs, 1, total);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  for (auto& cell : result.cells) {
    cell.diverged = std::any_of(cell.runs.begin(), cell.runs.end(),
                                [](const Trace& t) { return t.divergence.has_value(); });
    cell.steady_state_msd = steady_state_msd(cell.runs);
    double mass = 0.0;
    std::size_t count = 0;
    for (const auto& run : cell.runs) {
      if (run.divergence) continue;
      const std::size_t window = steady_window(run.malicious_weight_mass.size());
      for (std::size_t i = run.malicious_weight_mass.size() - window; i < run.malicious_weight_mass.size(); ++i) {
        mass += run.malicious_weight_mass[i];
        ++count;
      }
    }
    cell.malicious_weight_mass = count ? mass / static_cast<double>(count) : std::nan("");
  }
  return result;
}

void write_trace_csv(const SweepResult& result, std::ostream& out) {
  out << kTraceCsvHeader << '\n';
  const std::size_t iterations = result.config.iterations;
  for (const auto& cell : result.cells) {
    const std::string value = format_double(cell.cell.sweep_value);
    const char* ok = cell.cell.assumption.passed() ? "1" : "0";
    for (std::size_t r = 0; r < cell.runs.size(); ++r) {
      const Trace& trace = cell.runs[r];
      for (std::size_t i = 0; i < iterations; ++i) {
        const bool recorded = i < trace.msd.size();
        out << value << ',' << r << ',' << (i + 1) << ','
            << (recorded ? format_double(trace.msd[i]) : "inf") << ','
            << (recorded ? format_double(trace.malicious_weight_mass[i]) : "nan") << ',' << ok << '\n';
      }
    }
  }
}

void write_summary_csv(const SweepResult& result, std::ostream& out) {
  out << "sweep_value,malicious_count,steady_state_msd,malicious_weight_mass,assumption_ok,diverged\n";
  for (const auto& cell : result.cells) {
    out << format_double(cell.cell.sweep_value) << ',' << cell.cell.malicious_count << ','
        << format_double(cell.steady_state_msd) << ',' << format_double(cell.malicious_weight_mass) << ','
        << (cell.cell.assumption.passed() ? 1 : 0) << ',' << (cell.diverged ? 1 : 0) << '\n';
  }
}

std::string format_summary_table(const SweepResult& result) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "sweep_value" << std::setw(11) << "malicious" << std::setw(16)
     << "steady_msd" << std::setw(16) << "mal_weight" << std::setw(12) << "assumption1"
     << "diverged\n";
  for (const auto& cell : result.cells) {
    os << std::left << std::setw(14) << format_double(cell.cell.sweep_value).substr(0, 12)
       << std::setw(11) << cell.cell.malicious_count << std::setprecision(6) << std::setw(16)
       << cell.steady_state_msd << std::setw(16) << cell.malicious_weight_mass << std::setw(12)
       << (cell.cell.assumption.passed() ? "ok" : "VIOLATED") << (cell.diverged ? "yes" : "no") << '\n';
  }
  return os.str();
}

SweepResult run_config(const ExperimentConfig& cfg, const RunOptions& options,
                       const std::filesystem::path& out_dir) {
  SweepResult result = run_sweep(cfg, options);
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream trace(out_dir / "trace.csv", std::ios::binary);
    write_trace_csv(result, trace);
    if (!trace) throw std::runtime_error("failed writing " + (out_dir / "trace.csv").string());
  }
  {
    std::ofstream summary(out_dir / "summary.csv", std::ios::binary);
    write_summary_csv(result, summary);
    if (!summary) throw std::runtime_error("failed writing " + (out_dir / "summary.csv").string());
  }
  {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm utc{};
    gmtime_r(&now, &utc);
    std::ostringstream stamp;
    stamp << std::put_time(&utc, "%Y-%m-%dT%H:%M:%SZ");
    json meta{{"finished_at", stamp.str()},
              {"jobs", options.jobs},
              {"override_assumption1", options.override_assumption1},
              {"diverged", result.any_divergence()},
              {"config", json::parse(to_json(cfg))}};
    std::ofstream out(out_dir / "metadata.json", std::ios::binary);
    out << meta.dump(2) << '\n';
  }
  return result;
}

std::vector<SteadyStateRow> steady_state_from_csv(std::istream& in, double fraction) {
  std::string line;
  if (!std::getline(in, line) || line != kTraceCsvHeader) {
    throw InvalidInput("trace CSV header mismatch");
  }
  // sweep value -> run -> per-iteration msd, in file order.
  std::vector<double> order;
  std::map<double, std::map<std::size_t, std::vector<double>>> series;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() != 6) throw InvalidInput("trace CSV row has " + std::to_string(fields.size()) + " fields");
    const double value = std::stod(fields[0]);
    const std::size_t run = std::stoul(fields[1]);
    if (!series.count(value)) order.push_back(value);
    series[value][run].push_back(std::stod(fields[3]));
  }
  std::vector<SteadyStateRow> rows;
  for (double value : order) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& [run, msd] : series[value]) {
      const std::size_t window = steady_window(msd.size(), fraction);
      for (std::size_t i = msd.size() - window; i < msd.size(); ++i) {
        sum += msd[i];
        ++count;
      }
    }
    rows.push_back({value, sum / static_cast<double>(count)});
  }
  return rows;
}

std::vector<ComparisonRow> compare_rules(const std::vector<ExperimentConfig>& configs,
                                         const RunOptions& options) {
  if (configs.empty()) throw ConfigError("", "no configs to compare");
  const json reference = [&] {
    json j = json::parse(to_json(configs.front()));
    j.erase("aggregator");
    j.erase("output");
    return j;
  }();
  for (std::size_t i = 0; i < configs.size(); ++i) {
    configs[i].validate();
    if (configs[i].axis != SweepAxis::None) {
      throw ConfigError("sweep.axis", "rule comparison expects configs without a sweep");
    }
    json j = json::parse(to_json(configs[i]));
    j.erase("aggregator");
    j.erase("output");
    if (j != reference) {
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (reference.at(it.key()) != it.value()) {
          throw ConfigError(it.key(), "config " + std::to_string(i) + " differs from config 0 outside the aggregator");
        }
      }
    }
  }

  std::vector<ComparisonRow> rows;
  std::size_t baseline = 0;
  bool found_mean = false;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const SweepResult result = run_sweep(configs[i], options);
    rows.push_back({std::string(to_string(configs[i].aggregator.rule)), result.cells.front().steady_state_msd});
    if (!found_mean && configs[i].aggregator.rule == AggregationRule::Mean) {
      baseline = i;
      found_mean = true;
    }
  }
  for (auto& row : rows) row.ratio_to_baseline = row.steady_state_msd / rows[baseline].steady_state_msd;
  return rows;
}

std::string format_comparison_table(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(20) << "rule" << std::setw(18) << "steady_msd" << "ratio\n";
  for (const auto& row : rows) {
    os << std::left << std::setw(20) << row.rule << std::setprecision(6) << std::setw(18)
       << row.steady_state_msd << row.ratio_to_baseline << '\n';
  }
  return os.str();
}

}  // namespace refdiff
