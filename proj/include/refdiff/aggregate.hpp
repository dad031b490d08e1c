#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "refdiff/estimators.hpp"

namespace refdiff {

enum class AggregationRule {
  Mean,
  CoordinateMedian,
  TrimmedMean,
  GeometricMedian,
  MEstimator,
  MMEstimator,
};

std::string_view to_string(AggregationRule rule);

/// Which neighborhood combiner to run and its knobs. `loss` applies to the
/// M and MM rules, `trim_fraction` to TrimmedMean, `fixed_scale` to the
/// plain M rule (which starts at the weighted median but never re-estimates
/// scale), `irls` to every iterative rule.
struct AggregatorSpec {
  AggregationRule rule = AggregationRule::MMEstimator;
  LossSpec loss = LossSpec::tukey();
  double trim_fraction = 0.0;
  double fixed_scale = 1.0;
  IrlsSettings irls{};

  static AggregatorSpec mean() { return {AggregationRule::Mean, LossSpec::squared()}; }
  static AggregatorSpec coordinate_median() {
    return {AggregationRule::CoordinateMedian, LossSpec::absolute()};
  }
  static AggregatorSpec trimmed_mean(double fraction) {
    return {AggregationRule::TrimmedMean, LossSpec::squared(), fraction};
  }
  static AggregatorSpec geometric_median() { return {AggregationRule::GeometricMedian}; }
  static AggregatorSpec m_estimator(LossSpec loss, double scale) {
    return {AggregationRule::MEstimator, loss, 0.0, scale};
  }
  static AggregatorSpec mm_estimator(LossSpec loss = LossSpec::tukey()) {
    return {AggregationRule::MMEstimator, loss};
  }

  void validate() const;
};

struct AggregationOutput {
  ModelVector model;
  /// Row l, column m holds abar_l(m). GeometricMedian replicates its single
  /// per-neighbor weight across every column.
  Eigen::MatrixXd effective_weights;
  int converged_coords = 0;
};

/// Combines neighbor vectors into one. Coordinate-wise rules run the scalar
/// estimator on each coordinate independently; estimator failures are
/// rethrown as AggregationError carrying the coordinate.
AggregationOutput aggregate(std::span<const ModelVector> neighbors, std::span<const double> weights,
                            const AggregatorSpec& spec);

/// Effective-weight mass on the listed rows, averaged over coordinates.
double effective_weight_summary(const AggregationOutput& out,
                                std::span<const std::size_t> malicious_rows);

}  // namespace refdiff
