#include "refdiff/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#include <Eigen/Dense>

#include "refdiff/errors.hpp"

namespace refdiff {
namespace {

struct CombineResult {
  ModelVector model;
  /// Weight given to each agent, averaged over coordinates (length K).
  Eigen::VectorXd used;
  double malicious_mass = 0.0;
  std::size_t converged_coords = 0;
};

// Shared adapt/combine loop. `combine(i, k, phi, result)` fills the new
// iterate of agent k at iteration i.
template <typename Combine>
Trace diffuse(const LinearModelTask& task, const Topology& topology,
              const DiffusionSettings& settings, Combine&& combine) {
  const std::size_t K = topology.size();
  task.validate(K);
  settings.attack.validate(task.dimension);
  if (settings.iterations == 0) throw InvalidInput("iterations must be at least 1");
  if (!std::isfinite(settings.step_size) || settings.step_size < 0.0) {
    throw InvalidInput("step size must be non-negative");
  }
  if (!(settings.steady_fraction > 0.0 && settings.steady_fraction <= 1.0)) {
    throw InvalidInput("steady_fraction must lie in (0, 1]");
  }
  const auto report = validate_assumption1(topology, settings.epsilon);
  if (!report.passed() && !settings.override_assumption1) throw AssumptionViolation(report.describe());

  const auto dim = static_cast<Eigen::Index>(task.dimension);
  const ModelVector reference = settings.reference.value_or(task.w_true);
  if (reference.size() != dim) throw InvalidInput("reference has the wrong dimension");
  const ModelVector start = settings.initial.value_or(ModelVector::Zero(dim));
  if (start.size() != dim) throw InvalidInput("initial iterate has the wrong dimension");

  std::vector<RandomStream> streams;
  streams.reserve(K);
  for (std::size_t k = 0; k < K; ++k) streams.emplace_back(settings.seed, settings.run, k);

  const auto benign = topology.benign_agents();
  const double benign_count = static_cast<double>(benign.size());
  const std::size_t window = steady_window(settings.iterations, settings.steady_fraction);
  const std::size_t window_start = settings.iterations - window;

  Trace trace;
  trace.msd.reserve(settings.iterations);
  trace.malicious_weight_mass.reserve(settings.iterations);
  trace.steady_state_mean = ModelVector::Zero(dim);
  if (settings.record_weights) {
    trace.mean_effective_weights =
        Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(K));
  }

  std::vector<ModelVector> iterates(K, start);
  std::vector<ModelVector> phi(K);
  std::vector<ModelVector> next(K);
  CombineResult result;
  std::size_t window_samples = 0;

  for (std::size_t i = 1; i <= settings.iterations; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const DataSample sample = sample_data(task, k, streams[k]);
      phi[k] = adapt_step(iterates[k], stochastic_gradient(iterates[k], sample.u, sample.d),
                          settings.step_size);
      if (topology.is_malicious(k)) phi[k] = apply_attack(phi[k], settings.attack);
    }

    const bool in_window = i > window_start;
    double mass = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      result.used = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(K));
      result.malicious_mass = 0.0;
      result.converged_coords = 0;
      try {
        combine(i, k, phi, result);
      } catch (const AggregationError& e) {
        throw SimulationError(i, k, e.what());
      } catch (const DegenerateScale& e) {
        throw SimulationError(i, k, e.what());
      }
      next[k] = result.model;
      if (topology.is_malicious(k)) continue;
      mass += result.malicious_mass;
      trace.converged_coords += result.converged_coords;
      trace.total_coords += task.dimension;
      if (in_window && settings.record_weights) {
        trace.mean_effective_weights.col(static_cast<Eigen::Index>(k)) += result.used;
      }
    }
    std::swap(iterates, next);

    double deviation = 0.0;
    for (std::size_t k : benign) {
      if (!iterates[k].allFinite()) {
        trace.divergence = DivergenceEvent{i, k};
        break;
      }
      deviation += (reference - iterates[k]).squaredNorm();
    }
    if (trace.divergence) break;
    trace.msd.push_back(deviation / benign_count);
    trace.malicious_weight_mass.push_back(mass / benign_count);

    if (in_window) {
      for (std::size_t k : benign) trace.steady_state_mean += iterates[k];
      ++window_samples;
    }
    if (settings.observer) settings.observer(i, iterates);
  }

  if (window_samples > 0) {
    trace.steady_state_mean /= static_cast<double>(window_samples) * benign_count;
    if (settings.record_weights) trace.mean_effective_weights /= static_cast<double>(window_samples);
  }
  trace.final_iterates = std::move(iterates);
  return trace;
}

}  // namespace

void LinearModelTask::validate(std::size_t agents) const {
  if (dimension == 0) throw InvalidInput("task dimension must be at least 1");
  if (!std::isfinite(noise_variance) || noise_variance < 0.0) {
    throw InvalidInput("noise variance must be non-negative");
  }
  if (w_true.size() != static_cast<Eigen::Index>(dimension) || !w_true.allFinite()) {
    throw InvalidInput("w_true must be a finite vector of the task dimension");
  }
  if (!agent_w_true.empty()) {
    if (agent_w_true.size() != agents) throw InvalidInput("one minimizer per agent required");
    for (const auto& w : agent_w_true) {
      if (w.size() != static_cast<Eigen::Index>(dimension) || !w.allFinite()) {
        throw InvalidInput("agent minimizers must be finite vectors of the task dimension");
      }
    }
  }
}

void AttackSpec::validate(std::size_t dimension) const {
  if (!std::isfinite(delta)) throw InvalidInput("attack delta must be finite");
  if (!std::isfinite(gain)) throw InvalidInput("attack gain must be finite");
  if (kind == AttackKind::ValueReplace &&
      (replacement.size() != static_cast<Eigen::Index>(dimension) || !replacement.allFinite())) {
    throw InvalidInput("replacement vector must be finite and match the task dimension");
  }
}

RandomStream::RandomStream(std::uint64_t seed, std::uint64_t run, std::uint64_t agent,
                           Purpose purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(run), static_cast<std::uint32_t>(agent),
                    static_cast<std::uint32_t>(purpose)};
  engine_.seed(seq);
}

DataSample sample_data(const LinearModelTask& task, std::size_t agent, RandomStream& rng) {
  DataSample out;
  out.u.resize(static_cast<Eigen::Index>(task.dimension));
  for (Eigen::Index m = 0; m < out.u.size(); ++m) out.u[m] = rng.normal();
  const double noise = rng.normal() * std::sqrt(task.noise_variance);
  out.d = out.u.dot(task.minimizer(agent)) + noise;
  return out;
}

ModelVector stochastic_gradient(const ModelVector& w, const ModelVector& u, double d) {
  if (w.size() != u.size()) throw InvalidInput("regressor and iterate differ in dimension");
  return -u * (d - u.dot(w));
}

ModelVector adapt_step(const ModelVector& w, const ModelVector& grad, double mu) {
  if (w.size() != grad.size()) throw InvalidInput("gradient and iterate differ in dimension");
  return w - mu * grad;
}

ModelVector apply_attack(const ModelVector& phi, const AttackSpec& spec) {
  switch (spec.kind) {
    case AttackKind::None:
      return phi;
    case AttackKind::AdditiveShift:
      return (phi.array() + spec.delta).matrix();
    case AttackKind::SignFlip:
      return -spec.gain * phi;
    case AttackKind::ValueReplace:
      return spec.replacement;
  }
  return phi;
}

std::size_t steady_window(std::size_t iterations, double fraction) {
  const auto n =
      static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(iterations) - 1e-9));
  return std::clamp<std::size_t>(n, 1, std::max<std::size_t>(iterations, 1));
}

Trace run_diffusion(const LinearModelTask& task, const Topology& topology,
                    const CombinationMatrix& A, const AggregatorSpec& agg,
                    const DiffusionSettings& settings) {
  A.validate();
  if (A.size() != topology.size()) {
    throw InvalidInput("combination matrix and topology differ in size");
  }
  agg.validate();

  const std::size_t K = topology.size();
  std::vector<std::vector<std::size_t>> hoods(K);
  std::vector<std::vector<double>> hood_weights(K);
  std::vector<std::vector<std::size_t>> hood_malicious(K);
  for (std::size_t k = 0; k < K; ++k) {
    hoods[k] = topology.neighborhood(k);
    for (std::size_t r = 0; r < hoods[k].size(); ++r) {
      const std::size_t l = hoods[k][r];
      hood_weights[k].push_back(A.weights(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)));
      if (topology.is_malicious(l)) hood_malicious[k].push_back(r);
    }
  }

  // Agents with identical neighborhoods and weights (every agent of a fully
  // connected graph under uniform weights) aggregate identical inputs.
  std::size_t cached_agent = K;
  std::size_t cached_iteration = 0;
  AggregationOutput cached;
  std::vector<ModelVector> gathered;

  auto combine = [&](std::size_t i, std::size_t k, const std::vector<ModelVector>& phi,
                     CombineResult& result) {
    const bool reuse = cached_agent < K && cached_iteration == i &&
                       hoods[cached_agent] == hoods[k] && hood_weights[cached_agent] == hood_weights[k];
    if (!reuse) {
      gathered.clear();
      for (std::size_t l : hoods[k]) gathered.push_back(phi[l]);
      cached = aggregate(gathered, hood_weights[k], agg);
      cached_agent = k;
      cached_iteration = i;
    }
    result.model = cached.model;
    result.malicious_mass = effective_weight_summary(cached, hood_malicious[k]);
    result.converged_coords = static_cast<std::size_t>(cached.converged_coords);
    const auto& hood = hoods[k];
    for (std::size_t r = 0; r < hood.size(); ++r) {
      result.used[static_cast<Eigen::Index>(hood[r])] =
          cached.effective_weights.row(static_cast<Eigen::Index>(r)).mean();
    }
  };
  return diffuse(task, topology, settings, combine);
}

Trace run_benign_oracle(const LinearModelTask& task, const Topology& topology,
                        const CombinationMatrix& A, const DiffusionSettings& settings) {
  const Eigen::MatrixXd abar = benign_effective_weights(A, topology);
  const std::size_t K = topology.size();

  auto combine = [&](std::size_t, std::size_t k, const std::vector<ModelVector>& phi,
                     CombineResult& result) {
    if (topology.is_malicious(k)) {
      // Malicious agents keep their own update; benign agents never read it.
      result.model = phi[k];
      return;
    }
    const auto col = static_cast<Eigen::Index>(k);
    result.model = ModelVector::Zero(phi[k].size());
    for (std::size_t l = 0; l < K; ++l) {
      const double a = abar(static_cast<Eigen::Index>(l), col);
      if (a > 0.0) result.model += a * phi[l];
    }
    result.used = abar.col(col);
    result.converged_coords = static_cast<std::size_t>(phi[k].size());
  };
  return diffuse(task, topology, settings, combine);
}

double msd(std::span<const ModelVector> iterates, const ModelVector& reference) {
  if (iterates.empty()) throw InvalidInput("msd needs at least one iterate");
  double sum = 0.0;
  for (const auto& w : iterates) {
    if (w.size() != reference.size()) throw InvalidInput("iterate and reference differ in dimension");
    sum += (reference - w).squaredNorm();
  }
  return sum / static_cast<double>(iterates.size());
}

double steady_state_msd(std::span<const Trace> runs, double fraction) {
  if (runs.empty()) throw InvalidInput("no runs to average");
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& trace : runs) {
    if (trace.divergence) return std::numeric_limits<double>::infinity();
    const std::size_t window = steady_window(trace.msd.size(), fraction);
    for (std::size_t i = trace.msd.size() - window; i < trace.msd.size(); ++i) {
      sum += trace.msd[i];
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

ModelVector limit_point(std::span<const QuadraticObjective> objectives, const Eigen::VectorXd& p) {
  if (objectives.empty()) throw InvalidInput("limit point needs at least one objective");
  if (p.size() != static_cast<Eigen::Index>(objectives.size())) {
    throw InvalidInput("one Perron weight per objective required");
  }
  const Eigen::Index dim = objectives.front().minimizer.size();
  Eigen::MatrixXd hessian = Eigen::MatrixXd::Zero(dim, dim);
  ModelVector rhs = ModelVector::Zero(dim);
  for (std::size_t k = 0; k < objectives.size(); ++k) {
    const auto& obj = objectives[k];
    if (obj.minimizer.size() != dim || obj.hessian.rows() != dim || obj.hessian.cols() != dim) {
      throw InvalidInput("objectives differ in dimension");
    }
    const double pk = p[static_cast<Eigen::Index>(k)];
    hessian += pk * obj.hessian;
    rhs += pk * obj.hessian * obj.minimizer;
  }
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(hessian);
  if (!lu.isInvertible()) throw InvalidInput("combined Hessian is singular");
  return lu.solve(rhs);
}

ModelVector limit_point(const LinearModelTask& task, std::span<const std::size_t> agents,
                        const Eigen::VectorXd& p) {
  const auto dim = static_cast<Eigen::Index>(task.dimension);
  std::vector<QuadraticObjective> objectives;
  objectives.reserve(agents.size());
  for (std::size_t k : agents) {
    objectives.push_back({Eigen::MatrixXd::Identity(dim, dim), task.minimizer(k)});
  }
  return limit_point(objectives, p);
}

GradientNoiseStats measure_gradient_noise(const LinearModelTask& task, std::size_t agent,
                                          const ModelVector& w, std::size_t samples,
                                          RandomStream& rng) {
  if (samples == 0) throw InvalidInput("need at least one sample");
  const ModelVector true_gradient = w - task.minimizer(agent);
  GradientNoiseStats stats;
  stats.mean = ModelVector::Zero(w.size());
  for (std::size_t n = 0; n < samples; ++n) {
    const DataSample sample = sample_data(task, agent, rng);
    const ModelVector s = stochastic_gradient(w, sample.u, sample.d) - true_gradient;
    stats.mean += s;
    stats.second_moment += s.squaredNorm();
  }
  stats.mean /= static_cast<double>(samples);
  stats.second_moment /= static_cast<double>(samples);
  stats.deviation = true_gradient.squaredNorm();
  stats.samples = samples;
  return stats;
}

NoiseBound fit_noise_bound(std::span<const GradientNoiseStats> probes) {
  if (probes.empty()) throw InvalidInput("need at least one probe");
  const double n = static_cast<double>(probes.size());
  double mx = 0.0;
  double my = 0.0;
  for (const auto& pr : probes) {
    mx += pr.deviation;
    my += pr.second_moment;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0;
  double sxy = 0.0;
  for (const auto& pr : probes) {
    sxx += (pr.deviation - mx) * (pr.deviation - mx);
    sxy += (pr.deviation - mx) * (pr.second_moment - my);
  }
  NoiseBound bound;
  bound.beta2 = sxx > 0.0 ? std::max(0.0, sxy / sxx) : 0.0;
  bound.sigma2 = std::max(0.0, my - bound.beta2 * mx);
  double worst = 0.0;
  for (const auto& pr : probes) {
    worst = std::max(worst, pr.second_moment - (bound.beta2 * pr.deviation + bound.sigma2));
  }
  bound.sigma2 += worst;
  bound.slack = std::numeric_limits<double>::infinity();
  for (const auto& pr : probes) {
    bound.slack = std::min(bound.slack, bound.beta2 * pr.deviation + bound.sigma2 - pr.second_moment);
  }
  return bound;
}

}  // namespace refdiff
