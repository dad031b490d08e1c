#include "refdiff/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "refdiff/errors.hpp"

namespace refdiff {
namespace {

constexpr double kWeightSumTol = 1e-12;
constexpr double kAbsoluteResidualFloor = 1e-12;

void check_weights(std::span<const double> weights, std::size_t n) {
  if (n == 0) throw InvalidInput("sample is empty");
  if (weights.size() != n) throw InvalidInput("values and weights differ in length");
  double total = 0.0;
  for (double a : weights) {
    if (!std::isfinite(a) || a < 0.0) throw InvalidInput("weights must be finite and non-negative");
    total += a;
  }
  if (std::abs(total - 1.0) > kWeightSumTol) {
    throw InvalidInput("weights must sum to one (got " + std::to_string(total) + ")");
  }
}

// Sort order used for every accumulation so results do not depend on how
// the caller ordered the sample.
std::vector<std::size_t> canonical_order(std::span<const double> values,
                                         std::span<const double> weights) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    if (values[i] != values[j]) return values[i] < values[j];
    return weights[i] < weights[j];
  });
  return order;
}

struct MedianPick {
  double location;
  std::size_t lower;  // position in sorted order
  std::size_t upper;  // equals lower unless the midpoint rule applied
};

MedianPick median_pick(std::span<const double> values, std::span<const double> weights,
                       const std::vector<std::size_t>& order) {
  double total = 0.0;
  for (std::size_t idx : order) total += weights[idx];
  const double half = 0.5 * total;
  const double slack = kWeightSumTol * total;

  double cumulative = 0.0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t idx = order[pos];
    if (weights[idx] == 0.0) continue;
    cumulative += weights[idx];
    if (cumulative < half - slack) continue;
    if (cumulative > half + slack) return {values[idx], pos, pos};
    // Exactly half: average with the next order statistic that carries weight.
    for (std::size_t next = pos + 1; next < order.size(); ++next) {
      if (weights[order[next]] > 0.0) {
        return {0.5 * (values[idx] + values[order[next]]), pos, next};
      }
    }
    return {values[idx], pos, pos};
  }
  // Unreachable for a valid sample; fall back to the largest weighted value.
  const std::size_t last = order.size() - 1;
  return {values[order[last]], last, last};
}

double residual_in_order(std::span<const double> values, std::span<const double> weights,
                         const std::vector<std::size_t>& order, const LossSpec& loss, double scale,
                         double location) {
  double sum = 0.0;
  for (std::size_t idx : order) sum += weights[idx] * psi((values[idx] - location) / scale, loss);
  return std::abs(sum);
}

double median_of(std::span<const double> values, std::span<const double> weights) {
  return median_pick(values, weights, canonical_order(values, weights)).location;
}

}  // namespace

void LossSpec::validate() const {
  if (family == LossFamily::SquaredError || family == LossFamily::AbsoluteError) return;
  if (!std::isfinite(tuning) || tuning <= 0.0) throw InvalidInput("loss tuning constant must be positive");
}

void IrlsSettings::validate() const {
  if (max_iters < 1) throw InvalidInput("max_iters must be at least 1");
  if (!std::isfinite(tol) || tol <= 0.0) throw InvalidInput("tol must be positive");
  if (!std::isfinite(scale_floor) || scale_floor <= 0.0) throw InvalidInput("scale_floor must be positive");
}

WeightedSample::WeightedSample(std::vector<double> values, std::vector<double> weights)
    : values_(std::move(values)), weights_(std::move(weights)) {
  check_weights(weights_, values_.size());
  for (double v : values_) {
    if (!std::isfinite(v)) throw InvalidInput("sample values must be finite");
  }
}

WeightedSample WeightedSample::uniform(std::vector<double> values) {
  const std::size_t n = values.size();
  if (n == 0) throw InvalidInput("sample is empty");
  std::vector<double> weights(n, 1.0 / static_cast<double>(n));
  return WeightedSample(std::move(values), std::move(weights));
}

double psi(double u, const LossSpec& loss) {
  switch (loss.family) {
    case LossFamily::SquaredError:
      return u;
    case LossFamily::AbsoluteError:
      return (u > 0.0) - (u < 0.0);
    case LossFamily::Huber:
      return std::clamp(u, -loss.tuning, loss.tuning);
    case LossFamily::TukeyBisquare: {
      if (std::abs(u) >= loss.tuning) return 0.0;
      const double r = u / loss.tuning;
      const double t = 1.0 - r * r;
      return u * t * t;
    }
  }
  return 0.0;
}

double b_weight(double y, double scale, const LossSpec& loss) {
  if (!std::isfinite(y)) throw InvalidInput("residual must be finite");
  if (!std::isfinite(scale) || scale <= 0.0) throw InvalidInput("scale must be positive");
  const double u = y / scale;
  switch (loss.family) {
    case LossFamily::SquaredError:
      return 1.0;
    case LossFamily::AbsoluteError:
      return 1.0 / std::max(std::abs(u), kAbsoluteResidualFloor);
    case LossFamily::Huber: {
      const double au = std::abs(u);
      return au <= loss.tuning ? 1.0 : loss.tuning / au;
    }
    case LossFamily::TukeyBisquare: {
      if (std::abs(u) >= loss.tuning) return 0.0;
      const double r = u / loss.tuning;
      const double t = 1.0 - r * r;
      return t * t;
    }
  }
  return 0.0;
}

double weighted_median(const WeightedSample& s) { return median_of(s.values(), s.weights()); }

LocationResult weighted_median_fit(const WeightedSample& s) {
  const auto values = s.values();
  const auto weights = s.weights();
  const auto order = canonical_order(values, weights);
  const MedianPick pick = median_pick(values, weights, order);

  // Spread the selected order statistic's mass over every tie with the same
  // value, proportionally to the input weights.
  LocationResult out;
  out.location = pick.location;
  out.final_weights.assign(values.size(), 0.0);
  auto assign_group = [&](double value, double mass) {
    double group = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] == value) group += weights[i];
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] == value) out.final_weights[i] += mass * weights[i] / group;
    }
  };
  const double lo = values[order[pick.lower]];
  const double hi = values[order[pick.upper]];
  if (lo == hi) {
    assign_group(lo, 1.0);
  } else {
    assign_group(lo, 0.5);
    assign_group(hi, 0.5);
  }
  out.iterations = 1;
  out.converged = true;
  return out;
}

double weighted_mad(const WeightedSample& s, double center) {
  if (!std::isfinite(center)) throw InvalidInput("center must be finite");
  std::vector<double> deviations(s.size());
  const auto values = s.values();
  for (std::size_t i = 0; i < deviations.size(); ++i) deviations[i] = std::abs(values[i] - center);
  return kMadConsistency * median_of(deviations, s.weights());
}

double fixed_point_residual(const WeightedSample& s, const LossSpec& loss, double scale,
                            double location) {
  return residual_in_order(s.values(), s.weights(), canonical_order(s.values(), s.weights()), loss,
                           scale, location);
}

LocationResult m_estimate(const WeightedSample& s, const LossSpec& loss, double scale, double init,
                          const IrlsSettings& cfg) {
  loss.validate();
  cfg.validate();
  if (!std::isfinite(scale) || scale < cfg.scale_floor) {
    throw InvalidInput("scale must be finite and at least scale_floor");
  }
  if (!std::isfinite(init)) throw InvalidInput("initial location must be finite");

  const auto values = s.values();
  const auto weights = s.weights();
  const auto order = canonical_order(values, weights);
  const std::size_t n = values.size();

  LocationResult out;
  out.scale = scale;
  out.final_weights.assign(n, 0.0);

  std::vector<double> scaled(n);
  double location = init;
  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    double numerator = 0.0;
    double denominator = 0.0;
    for (std::size_t idx : order) {
      scaled[idx] = weights[idx] * b_weight(values[idx] - location, scale, loss);
      numerator += scaled[idx] * values[idx];
      denominator += scaled[idx];
    }
    if (!(denominator > 0.0)) {
      throw DegenerateScale("all IRLS weights vanished at location " + std::to_string(location) +
                            " with scale " + std::to_string(scale));
    }
    const double next = numerator / denominator;
    const double change = std::abs(next - location);
    location = next;
    for (std::size_t i = 0; i < n; ++i) out.final_weights[i] = scaled[i] / denominator;
    out.iterations = iter;

    // b is constant for the squared loss, so the first step is already the fixed point.
    if (loss.family == LossFamily::SquaredError) {
      out.converged = true;
      break;
    }
    if (change <= cfg.tol * std::max(1.0, std::abs(location)) &&
        residual_in_order(values, weights, order, loss, scale, location) <= kFixedPointResidualTol) {
      out.converged = true;
      break;
    }
  }
  out.location = location;
  return out;
}

LocationResult mm_estimate(const WeightedSample& s, const LossSpec& loss, const IrlsSettings& cfg) {
  cfg.validate();
  const double center = weighted_median(s);
  const double scale = std::max(weighted_mad(s, center), cfg.scale_floor);
  return m_estimate(s, loss, scale, center, cfg);
}

LocationResult trimmed_mean_fit(const WeightedSample& s, double trim_fraction) {
  if (!std::isfinite(trim_fraction) || trim_fraction < 0.0 || trim_fraction >= 0.5) {
    throw InvalidInput("trim_fraction must lie in [0, 0.5)");
  }
  const auto values = s.values();
  const auto weights = s.weights();
  const std::size_t n = values.size();
  // Guard against 0.2 * 5 landing a hair above 1.
  const auto cut = static_cast<std::size_t>(std::ceil(trim_fraction * static_cast<double>(n) - 1e-9));
  if (2 * cut >= n) throw InvalidInput("trimming removes every point");

  const auto order = canonical_order(values, weights);
  double mass = 0.0;
  double sum = 0.0;
  for (std::size_t pos = cut; pos < n - cut; ++pos) {
    mass += weights[order[pos]];
    sum += weights[order[pos]] * values[order[pos]];
  }
  if (!(mass > 0.0)) throw InvalidInput("trimming leaves no weight");

  LocationResult out;
  out.location = sum / mass;
  out.final_weights.assign(n, 0.0);
  for (std::size_t pos = cut; pos < n - cut; ++pos) out.final_weights[order[pos]] = weights[order[pos]] / mass;
  out.iterations = 1;
  out.converged = true;
  return out;
}

double trimmed_mean(const WeightedSample& s, double trim_fraction) {
  return trimmed_mean_fit(s, trim_fraction).location;
}

GeometricMedianResult geometric_median(std::span<const ModelVector> points,
                                       std::span<const double> weights, const IrlsSettings& cfg) {
  cfg.validate();
  const std::size_t n = points.size();
  check_weights(weights, n);
  const Eigen::Index dim = points[0].size();
  if (dim == 0) throw InvalidInput("points must have at least one coordinate");
  for (const auto& p : points) {
    if (p.size() != dim) throw InvalidInput("points differ in dimension");
    if (!p.allFinite()) throw InvalidInput("points must be finite");
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    for (Eigen::Index m = 0; m < dim; ++m) {
      if (points[i][m] != points[j][m]) return points[i][m] < points[j][m];
    }
    return weights[i] < weights[j];
  });

  GeometricMedianResult out;
  out.final_weights.assign(n, 0.0);

  // Coordinate-wise weighted median start.
  ModelVector x(dim);
  std::vector<double> column(n);
  for (Eigen::Index m = 0; m < dim; ++m) {
    for (std::size_t i = 0; i < n; ++i) column[i] = points[i][m];
    x[m] = median_of(column, weights);
  }

  // Returns true and fills `out` when data point j is optimal: the
  // subgradient pull of the other points is no larger than the mass at j.
  auto optimal_at = [&](std::size_t j) {
    ModelVector pull = ModelVector::Zero(dim);
    double mass = 0.0;
    for (std::size_t idx : order) {
      const ModelVector diff = points[idx] - points[j];
      const double d = diff.norm();
      if (d == 0.0) {
        mass += weights[idx];
      } else {
        pull += weights[idx] * diff / d;
      }
    }
    if (pull.norm() > mass) return false;
    out.point = points[j];
    for (std::size_t i = 0; i < n; ++i) {
      out.final_weights[i] = (points[i] - points[j]).norm() == 0.0 ? weights[i] / mass : 0.0;
    }
    out.converged = true;
    return true;
  };

  std::vector<double> distance(n);
  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    out.iterations = iter;
    for (std::size_t idx : order) {
      distance[idx] = (points[idx] - x).norm();
      const double snap = cfg.tol * std::max(1.0, points[idx].norm());
      if (distance[idx] <= snap && optimal_at(idx)) return out;
    }

    // Vardi-Zhang step: coincident points drop out of the Weiszfeld average
    // and instead damp the move by their mass relative to the remaining pull.
    ModelVector weighted_sum = ModelVector::Zero(dim);
    ModelVector pull = ModelVector::Zero(dim);
    double inverse_total = 0.0;
    double coincident_mass = 0.0;
    for (std::size_t idx : order) {
      if (distance[idx] == 0.0) {
        coincident_mass += weights[idx];
        continue;
      }
      const double q = weights[idx] / distance[idx];
      weighted_sum += q * points[idx];
      pull += q * (points[idx] - x);
      inverse_total += q;
    }
    if (!(inverse_total > 0.0)) {
      // Every point coincides with x.
      out.point = x;
      for (std::size_t i = 0; i < n; ++i) out.final_weights[i] = weights[i];
      out.converged = true;
      return out;
    }
    ModelVector next = weighted_sum / inverse_total;
    for (std::size_t i = 0; i < n; ++i) {
      out.final_weights[i] = distance[i] == 0.0 ? 0.0 : (weights[i] / distance[i]) / inverse_total;
    }
    if (coincident_mass > 0.0) {
      const double gamma = std::min(1.0, coincident_mass / pull.norm());
      next = (1.0 - gamma) * next + gamma * x;
    }
    const double change = (next - x).norm();
    x = std::move(next);
    if (change <= cfg.tol * std::max(1.0, x.norm())) {
      out.converged = true;
      break;
    }
  }
  out.point = x;
  return out;
}

}  // namespace refdiff
