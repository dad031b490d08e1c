#include "refdiff/aggregate.hpp"

#include <cmath>
#include <exception>
#include <utility>
#include <vector>

#include "refdiff/errors.hpp"

namespace refdiff {
namespace {

void check_combination_weights(std::span<const double> weights) {
  double total = 0.0;
  for (double a : weights) {
    if (!std::isfinite(a) || a < 0.0) throw InvalidInput("weights must be finite and non-negative");
    total += a;
  }
  if (std::abs(total - 1.0) > 1e-12) throw InvalidInput("weights must sum to one");
}

}  // namespace

std::string_view to_string(AggregationRule rule) {
  switch (rule) {
    case AggregationRule::Mean: return "mean";
    case AggregationRule::CoordinateMedian: return "median";
    case AggregationRule::TrimmedMean: return "trimmed_mean";
    case AggregationRule::GeometricMedian: return "geometric_median";
    case AggregationRule::MEstimator: return "m_estimator";
    case AggregationRule::MMEstimator: return "mm";
  }
  return "unknown";
}

void AggregatorSpec::validate() const {
  irls.validate();
  switch (rule) {
    case AggregationRule::TrimmedMean:
      if (!std::isfinite(trim_fraction) || trim_fraction < 0.0 || trim_fraction >= 0.5) {
        throw InvalidInput("trim_fraction must lie in [0, 0.5)");
      }
      break;
    case AggregationRule::MEstimator:
      loss.validate();
      if (!std::isfinite(fixed_scale) || fixed_scale < irls.scale_floor) {
        throw InvalidInput("fixed_scale must be at least scale_floor");
      }
      break;
    case AggregationRule::MMEstimator:
      loss.validate();
      break;
    default:
      break;
  }
}

AggregationOutput aggregate(std::span<const ModelVector> neighbors, std::span<const double> weights,
                            const AggregatorSpec& spec) {
  spec.validate();
  const std::size_t n = neighbors.size();
  if (n == 0) throw InvalidInput("no neighbors to aggregate");
  if (weights.size() != n) throw InvalidInput("one weight per neighbor required");
  const Eigen::Index dim = neighbors[0].size();
  if (dim == 0) throw InvalidInput("model vectors must have at least one coordinate");
  for (const auto& v : neighbors) {
    if (v.size() != dim) throw InvalidInput("neighbor vectors differ in length");
  }
  check_combination_weights(weights);

  AggregationOutput out;
  out.model.resize(dim);
  out.effective_weights.resize(static_cast<Eigen::Index>(n), dim);

  if (spec.rule == AggregationRule::Mean) {
    // Plain combine, in neighbor order.
    out.model.setZero();
    for (std::size_t l = 0; l < n; ++l) {
      out.model += weights[l] * neighbors[l];
      out.effective_weights.row(static_cast<Eigen::Index>(l)).setConstant(weights[l]);
    }
    out.converged_coords = static_cast<int>(dim);
    return out;
  }

  if (spec.rule == AggregationRule::GeometricMedian) {
    const GeometricMedianResult gm = geometric_median(neighbors, weights, spec.irls);
    out.model = gm.point;
    for (std::size_t l = 0; l < n; ++l) {
      out.effective_weights.row(static_cast<Eigen::Index>(l)).setConstant(gm.final_weights[l]);
    }
    out.converged_coords = gm.converged ? static_cast<int>(dim) : 0;
    return out;
  }

  const std::vector<double> w(weights.begin(), weights.end());
  for (Eigen::Index m = 0; m < dim; ++m) {
    std::vector<double> column(n);
    for (std::size_t l = 0; l < n; ++l) column[l] = neighbors[l][m];
    LocationResult r;
    try {
      const WeightedSample sample(std::move(column), w);
      switch (spec.rule) {
        case AggregationRule::CoordinateMedian:
          r = weighted_median_fit(sample);
          break;
        case AggregationRule::TrimmedMean:
          r = trimmed_mean_fit(sample, spec.trim_fraction);
          break;
        case AggregationRule::MEstimator:
          r = m_estimate(sample, spec.loss, spec.fixed_scale, weighted_median(sample), spec.irls);
          break;
        case AggregationRule::MMEstimator:
          r = mm_estimate(sample, spec.loss, spec.irls);
          break;
        default:
          break;
      }
    } catch (const std::exception& e) {
      throw AggregationError(static_cast<std::size_t>(m), e.what());
    }
    out.model[m] = r.location;
    for (std::size_t l = 0; l < n; ++l) {
      out.effective_weights(static_cast<Eigen::Index>(l), m) = r.final_weights[l];
    }
    if (r.converged) ++out.converged_coords;
  }
  return out;
}

double effective_weight_summary(const AggregationOutput& out,
                                std::span<const std::size_t> malicious_rows) {
  const Eigen::Index cols = out.effective_weights.cols();
  if (malicious_rows.empty() || cols == 0) return 0.0;
  double mass = 0.0;
  for (std::size_t row : malicious_rows) {
    if (row >= static_cast<std::size_t>(out.effective_weights.rows())) {
      throw InvalidInput("malicious row index out of range");
    }
    mass += out.effective_weights.row(static_cast<Eigen::Index>(row)).sum();
  }
  return mass / static_cast<double>(cols);
}

}  // namespace refdiff
