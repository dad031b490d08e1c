#pragma once

// Adapt-then-combine diffusion over a linear regression task, with optional
// malicious agents and any aggregation rule in the combine step.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "refdiff/aggregate.hpp"
#include "refdiff/estimators.hpp"
#include "refdiff/network.hpp"

namespace refdiff {

/// d = u^T w_k + v with u ~ N(0, I) and v ~ N(0, noise_variance).
/// Agents share `w_true` unless `agent_w_true` lists one minimizer per agent.
struct LinearModelTask {
  std::size_t dimension = 10;
  double noise_variance = 0.01;
  ModelVector w_true;
  std::vector<ModelVector> agent_w_true;

  const ModelVector& minimizer(std::size_t agent) const {
    return agent_w_true.empty() ? w_true : agent_w_true[agent];
  }
  void validate(std::size_t agents) const;
};

enum class AttackKind { None, AdditiveShift, SignFlip, ValueReplace };

/// Perturbation a malicious agent applies to its freshly adapted phi
/// before sharing it.
struct AttackSpec {
  AttackKind kind = AttackKind::None;
  double delta = 0.0;
  double gain = 1.0;
  ModelVector replacement;

  static AttackSpec none() { return {}; }
  static AttackSpec additive_shift(double delta) { return {AttackKind::AdditiveShift, delta, 1.0, {}}; }
  static AttackSpec sign_flip(double gain) { return {AttackKind::SignFlip, 0.0, gain, {}}; }
  static AttackSpec value_replace(ModelVector v) {
    return {AttackKind::ValueReplace, 0.0, 1.0, std::move(v)};
  }

  void validate(std::size_t dimension) const;
};

/// Independent Gaussian stream for one (run, agent) pair. The engine is
/// seeded with std::seed_seq over {seed low 32 bits, seed high 32 bits,
/// run, agent, purpose}, so an agent's draws never depend on how many
/// other agents or runs exist.
class RandomStream {
 public:
  enum class Purpose : std::uint32_t { AgentData = 1, TaskSetup = 2, NoiseProbe = 3 };

  RandomStream(std::uint64_t seed, std::uint64_t run, std::uint64_t agent,
               Purpose purpose = Purpose::AgentData);

  double normal() { return normal_(engine_); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_;
};

struct DataSample {
  ModelVector u;
  double d = 0.0;
};

/// Draws u first (coordinate order), then the noise v.
DataSample sample_data(const LinearModelTask& task, std::size_t agent, RandomStream& rng);

/// -u (d - u^T w): an unbiased estimate of the gradient of
/// J(w) = E (d - u^T w)^2 / 2.
ModelVector stochastic_gradient(const ModelVector& w, const ModelVector& u, double d);

/// w - mu * grad.
ModelVector adapt_step(const ModelVector& w, const ModelVector& grad, double mu);

ModelVector apply_attack(const ModelVector& phi, const AttackSpec& spec);

struct DivergenceEvent {
  std::size_t iteration = 0;
  std::size_t agent = 0;
};

struct DiffusionSettings {
  double step_size = 0.01;
  std::size_t iterations = 2000;
  std::uint64_t seed = 0;
  std::size_t run = 0;
  AttackSpec attack;
  double epsilon = 0.45;
  bool override_assumption1 = false;
  /// Fraction of final iterations that forms the steady-state window.
  double steady_fraction = 0.1;
  /// Starting iterate for every agent; zero when unset.
  std::optional<ModelVector> initial;
  /// MSD reference; task.w_true when unset.
  std::optional<ModelVector> reference;
  /// Accumulate window-averaged effective weights into Trace::mean_effective_weights.
  bool record_weights = false;
  /// Called after every combine step with (iteration, iterates).
  std::function<void(std::size_t, std::span<const ModelVector>)> observer;
};

struct Trace {
  /// Per iteration: benign average of ||reference - w_k||^2.
  std::vector<double> msd;
  /// Per iteration: benign average of the effective weight placed on
  /// malicious neighbors.
  std::vector<double> malicious_weight_mass;
  std::optional<DivergenceEvent> divergence;
  /// Benign iterates averaged over the steady-state window.
  ModelVector steady_state_mean;
  /// (l, k): weight agent k gave neighbor l, averaged over coordinates and
  /// the steady-state window. Benign columns only; empty unless requested.
  Eigen::MatrixXd mean_effective_weights;
  std::vector<ModelVector> final_iterates;
  /// Coordinates whose estimator converged, summed over benign agents and
  /// iterations.
  std::size_t converged_coords = 0;
  std::size_t total_coords = 0;
};

/// Number of final iterations averaged for steady-state figures.
std::size_t steady_window(std::size_t iterations, double fraction = 0.1);

/// Every agent adapts on fresh data; malicious agents then perturb their
/// phi; every agent combines its neighbors' phi with `agg`. A non-finite
/// benign iterate ends the run with a divergence event. Throws
/// AssumptionViolation unless the network satisfies the contamination
/// assumption or the override is set, and SimulationError when an
/// aggregation fails.
Trace run_diffusion(const LinearModelTask& task, const Topology& topology,
                    const CombinationMatrix& A, const AggregatorSpec& agg,
                    const DiffusionSettings& settings);

/// Same data and adapt steps, but benign agents combine only benign phi
/// with the rescaled weights of benign_effective_weights: the trajectory a
/// perfectly discriminating aggregator would follow.
Trace run_benign_oracle(const LinearModelTask& task, const Topology& topology,
                        const CombinationMatrix& A, const DiffusionSettings& settings);

/// Mean of ||reference - w||^2 over the given iterates.
double msd(std::span<const ModelVector> iterates, const ModelVector& reference);

/// Mean of the per-iteration MSD over the final window of every trace.
double steady_state_msd(std::span<const Trace> runs, double fraction = 0.1);

struct QuadraticObjective {
  Eigen::MatrixXd hessian;
  ModelVector minimizer;
};

/// argmin_w sum_k p_k (w - w_k)^T R_k (w - w_k) / 2, which is
/// (sum p_k R_k)^{-1} sum p_k R_k w_k. Throws InvalidInput when the
/// combined Hessian is singular.
ModelVector limit_point(std::span<const QuadraticObjective> objectives, const Eigen::VectorXd& p);

/// limit_point for the linear task (R_k = I) over the listed agents.
ModelVector limit_point(const LinearModelTask& task, std::span<const std::size_t> agents,
                        const Eigen::VectorXd& p);

struct GradientNoiseStats {
  ModelVector mean;
  double second_moment = 0.0;
  /// ||w_k - w||^2 at the probe point.
  double deviation = 0.0;
  std::size_t samples = 0;
};

/// Monte-Carlo moments of s = gradient estimate - true gradient at w.
GradientNoiseStats measure_gradient_noise(const LinearModelTask& task, std::size_t agent,
                                          const ModelVector& w, std::size_t samples,
                                          RandomStream& rng);

struct NoiseBound {
  double beta2 = 0.0;
  double sigma2 = 0.0;
  /// min over probes of beta2 * deviation + sigma2 - second_moment (>= 0).
  double slack = 0.0;
};

/// Least-squares line through (deviation, second_moment), then sigma2 is
/// raised until the line covers every probe.
NoiseBound fit_noise_bound(std::span<const GradientNoiseStats> probes);

}  // namespace refdiff
