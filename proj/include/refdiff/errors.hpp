#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace refdiff {

/// Malformed arguments: mismatched lengths, negative weights, non-finite inputs.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Every IRLS weight vanished at some iterate. The scale or the starting
/// point is unusable for the chosen loss.
class DegenerateScale : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Power iteration hit its cap without reaching a fixed point.
class ConvergenceFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A run was requested on a network that breaks the contamination
/// assumption and no override was given.
class AssumptionViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Estimator failure inside a coordinate-wise aggregation.
class AggregationError : public std::runtime_error {
 public:
  AggregationError(std::size_t coordinate, const std::string& what)
      : std::runtime_error("coordinate " + std::to_string(coordinate) + ": " + what),
        coordinate_(coordinate) {}

  std::size_t coordinate() const noexcept { return coordinate_; }

 private:
  std::size_t coordinate_;
};

/// Aggregation failure during a diffusion run, tagged with where it happened.
class SimulationError : public std::runtime_error {
 public:
  SimulationError(std::size_t iteration, std::size_t agent, const std::string& what)
      : std::runtime_error("iteration " + std::to_string(iteration) + ", agent " +
                           std::to_string(agent) + ": " + what),
        iteration_(iteration),
        agent_(agent) {}

  std::size_t iteration() const noexcept { return iteration_; }
  std::size_t agent() const noexcept { return agent_; }

 private:
  std::size_t iteration_;
  std::size_t agent_;
};

}  // namespace refdiff
