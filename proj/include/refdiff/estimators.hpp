#pragma once

// Robust location and scale estimation over weighted scalar samples.
//
// Every estimator here works on a WeightedSample: values v_l paired with
// non-negative weights a_l that sum to one. The M-estimators solve
//
//   sum_l a_l psi((v_l - w) / s) = 0
//
// by iteratively reweighted averaging, w <- sum_l abar_l v_l with
// abar_l proportional to a_l b((v_l - w) / s) and b(u) = psi(u) / u.

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace refdiff {

using ModelVector = Eigen::VectorXd;

inline constexpr double kTukeyDefaultTuning = 4.685;
inline constexpr double kHuberDefaultTuning = 1.345;
/// Gaussian consistency factor for the median absolute deviation.
inline constexpr double kMadConsistency = 1.4826;
/// Required |sum a psi| at a point reported as converged.
inline constexpr double kFixedPointResidualTol = 1e-8;

enum class LossFamily { SquaredError, AbsoluteError, Huber, TukeyBisquare };

struct LossSpec {
  LossFamily family = LossFamily::TukeyBisquare;
  double tuning = kTukeyDefaultTuning;

  static LossSpec squared() { return {LossFamily::SquaredError, 1.0}; }
  static LossSpec absolute() { return {LossFamily::AbsoluteError, 1.0}; }
  static LossSpec huber(double k = kHuberDefaultTuning) { return {LossFamily::Huber, k}; }
  static LossSpec tukey(double c = kTukeyDefaultTuning) { return {LossFamily::TukeyBisquare, c}; }

  void validate() const;
};

struct IrlsSettings {
  int max_iters = 100;
  double tol = 1e-10;
  double scale_floor = 1e-9;

  void validate() const;
};

/// Values with combination weights. Construction checks the invariants:
/// equal non-zero lengths, finite values, non-negative weights summing to
/// one within 1e-12.
class WeightedSample {
 public:
  WeightedSample(std::vector<double> values, std::vector<double> weights);

  /// Equal weights 1/n.
  static WeightedSample uniform(std::vector<double> values);

  std::span<const double> values() const { return values_; }
  std::span<const double> weights() const { return weights_; }
  std::size_t size() const { return values_.size(); }

 private:
  std::vector<double> values_;
  std::vector<double> weights_;
};

struct LocationResult {
  double location = 0.0;
  /// Normalized IRLS weights abar_l that produced `location`, in input order.
  std::vector<double> final_weights;
  int iterations = 0;
  bool converged = false;
  /// Scale used to standardize residuals.
  double scale = 1.0;
};

/// psi(u) = rho'(u) on a standardized residual.
double psi(double u, const LossSpec& loss);

/// b(y / scale), where b(u) = psi(u) / u and b(0) = psi'(0). For the
/// absolute loss |u| is floored at 1e-12 so b stays finite.
double b_weight(double y, double scale, const LossSpec& loss);

/// Smallest value whose cumulative weight reaches half the total; when the
/// cumulative weight lands exactly on one half, the midpoint between that
/// value and the next larger one.
double weighted_median(const WeightedSample& s);

/// weighted_median plus weights that reproduce it: the selected order
/// statistic (or the two averaged ones) share the mass over their ties.
LocationResult weighted_median_fit(const WeightedSample& s);

/// kMadConsistency times the weighted median of |v - center|.
double weighted_mad(const WeightedSample& s, double center);

/// |sum_l a_l psi((v_l - location) / scale)|.
double fixed_point_residual(const WeightedSample& s, const LossSpec& loss, double scale,
                            double location);

/// IRLS from `init` with a fixed scale. Throws DegenerateScale when every
/// weight vanishes; returns converged = false when max_iters runs out.
LocationResult m_estimate(const WeightedSample& s, const LossSpec& loss, double scale,
                          double init, const IrlsSettings& cfg = {});

/// m_estimate started at the weighted median and standardized by the
/// weighted MAD, clamped below at cfg.scale_floor.
LocationResult mm_estimate(const WeightedSample& s, const LossSpec& loss = LossSpec::tukey(),
                           const IrlsSettings& cfg = {});

/// Weighted mean after dropping ceil(trim_fraction * n) order statistics
/// from each tail; surviving weights are renormalized.
double trimmed_mean(const WeightedSample& s, double trim_fraction);

/// trimmed_mean plus the renormalized weights of the surviving points.
LocationResult trimmed_mean_fit(const WeightedSample& s, double trim_fraction);

struct GeometricMedianResult {
  ModelVector point;
  /// a_l / ||v_l - point|| normalized; a unit mass when the optimum sits on
  /// a data point.
  std::vector<double> final_weights;
  int iterations = 0;
  bool converged = false;
};

/// Weiszfeld iteration for argmin_w sum_l a_l ||v_l - w||, started at the
/// coordinate-wise weighted median.
GeometricMedianResult geometric_median(std::span<const ModelVector> points,
                                       std::span<const double> weights,
                                       const IrlsSettings& cfg = {});

inline ModelVector weiszfeld(std::span<const ModelVector> points, std::span<const double> weights,
                             const IrlsSettings& cfg = {}) {
  return geometric_median(points, weights, cfg).point;
}

}  // namespace refdiff
