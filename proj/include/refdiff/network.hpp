#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace refdiff {

enum class TopologyKind { FullyConnected, Ring, ErdosRenyi };

struct TopologySpec {
  TopologyKind kind = TopologyKind::FullyConnected;
  /// Edge probability and seed, ErdosRenyi only.
  double probability = 0.5;
  std::uint64_t seed = 0;
};

/// Undirected graph with self-loops and a benign/malicious label per agent.
class Topology {
 public:
  Topology(std::size_t agents, std::vector<char> adjacency, std::vector<char> malicious);

  std::size_t size() const { return agents_; }
  bool connected(std::size_t from, std::size_t to) const { return adjacency_[from * agents_ + to] != 0; }
  bool is_malicious(std::size_t k) const { return malicious_[k] != 0; }

  /// N_k in increasing agent order, k included.
  std::vector<std::size_t> neighborhood(std::size_t k) const;
  std::vector<std::size_t> benign_agents() const;
  std::vector<std::size_t> malicious_agents() const;

 private:
  std::size_t agents_;
  std::vector<char> adjacency_;
  std::vector<char> malicious_;
};

/// Throws InvalidInput if K == 0, a malicious index is out of range, or an
/// ErdosRenyi draw leaves the benign agents disconnected.
Topology build_topology(const TopologySpec& spec, std::size_t agents,
                        std::span<const std::size_t> malicious);

/// Left-stochastic weights: entry (l, k) is a_lk, each column sums to one.
struct CombinationMatrix {
  Eigen::MatrixXd weights;

  std::size_t size() const { return static_cast<std::size_t>(weights.cols()); }
  /// Square, non-negative, columns summing to one within 1e-12.
  void validate() const;
};

/// a_lk = 1 / |N_k| for l in N_k.
CombinationMatrix uniform_combination(const Topology& t);

struct NeighborhoodViolation {
  std::size_t agent;
  std::size_t benign_neighbors;
  std::size_t neighborhood_size;
};

struct Assumption1Report {
  double epsilon = 0.0;
  bool benign_connected = false;
  std::vector<NeighborhoodViolation> violations;

  bool passed() const { return benign_connected && violations.empty(); }
  std::string describe() const;
};

/// Every benign k needs |N_k^b| / |N_k| > 1 - epsilon, and the benign agents
/// must induce a connected subgraph.
Assumption1Report validate_assumption1(const Topology& t, double epsilon);

/// Benign-only combination: column k of A restricted to benign rows and
/// rescaled to sum to one. `agents[i]` is the original index of row/column i.
struct BenignReduction {
  CombinationMatrix matrix;
  std::vector<std::size_t> agents;
};

BenignReduction benign_reduced_matrix(const CombinationMatrix& A, const Topology& t);

/// The same rescaled weights embedded back into a K x K matrix with zero
/// rows and columns for malicious agents.
Eigen::MatrixXd benign_effective_weights(const CombinationMatrix& A, const Topology& t);

inline constexpr int kPerronMaxIters = 10000;
inline constexpr double kPerronTol = 1e-12;

/// Power iteration from the uniform vector for Ab p = p, sum(p) = 1.
/// Throws ConvergenceFailure if the cap is reached or the result is not
/// strictly positive.
Eigen::VectorXd perron_vector(const CombinationMatrix& Ab);

}  // namespace refdiff
