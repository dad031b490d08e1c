#include "refdiff/network.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>
#include <sstream>

#include "refdiff/errors.hpp"

namespace refdiff {
namespace {

bool benign_subgraph_connected(const Topology& t) {
  const auto benign = t.benign_agents();
  if (benign.empty()) return false;
  std::vector<char> seen(t.size(), 0);
  std::deque<std::size_t> queue{benign.front()};
  seen[benign.front()] = 1;
  std::size_t reached = 1;
  while (!queue.empty()) {
    const std::size_t k = queue.front();
    queue.pop_front();
    for (std::size_t l = 0; l < t.size(); ++l) {
      if (seen[l] || t.is_malicious(l) || !t.connected(k, l)) continue;
      seen[l] = 1;
      ++reached;
      queue.push_back(l);
    }
  }
  return reached == benign.size();
}

}  // namespace

Topology::Topology(std::size_t agents, std::vector<char> adjacency, std::vector<char> malicious)
    : agents_(agents), adjacency_(std::move(adjacency)), malicious_(std::move(malicious)) {
  if (agents_ == 0) throw InvalidInput("topology needs at least one agent");
  if (adjacency_.size() != agents_ * agents_) throw InvalidInput("adjacency must be K x K");
  if (malicious_.size() != agents_) throw InvalidInput("one label per agent required");
  for (std::size_t k = 0; k < agents_; ++k) {
    if (!connected(k, k)) throw InvalidInput("every agent must neighbor itself");
    for (std::size_t l = 0; l < k; ++l) {
      if (connected(k, l) != connected(l, k)) throw InvalidInput("adjacency must be symmetric");
    }
  }
}

std::vector<std::size_t> Topology::neighborhood(std::size_t k) const {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < agents_; ++l) {
    if (connected(l, k)) out.push_back(l);
  }
  return out;
}

std::vector<std::size_t> Topology::benign_agents() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < agents_; ++k) {
    if (!is_malicious(k)) out.push_back(k);
  }
  return out;
}

std::vector<std::size_t> Topology::malicious_agents() const {
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < agents_; ++k) {
    if (is_malicious(k)) out.push_back(k);
  }
  return out;
}

Topology build_topology(const TopologySpec& spec, std::size_t agents,
                        std::span<const std::size_t> malicious) {
  if (agents == 0) throw InvalidInput("topology needs at least one agent");
  std::vector<char> labels(agents, 0);
  for (std::size_t k : malicious) {
    if (k >= agents) throw InvalidInput("malicious agent index out of range");
    labels[k] = 1;
  }

  std::vector<char> adjacency(agents * agents, 0);
  auto link = [&](std::size_t a, std::size_t b) {
    adjacency[a * agents + b] = 1;
    adjacency[b * agents + a] = 1;
  };
  for (std::size_t k = 0; k < agents; ++k) link(k, k);

  switch (spec.kind) {
    case TopologyKind::FullyConnected:
      std::fill(adjacency.begin(), adjacency.end(), 1);
      break;
    case TopologyKind::Ring:
      for (std::size_t k = 0; k < agents; ++k) link(k, (k + 1) % agents);
      break;
    case TopologyKind::ErdosRenyi: {
      if (!(spec.probability >= 0.0 && spec.probability <= 1.0)) {
        throw InvalidInput("edge probability must lie in [0, 1]");
      }
      std::mt19937_64 rng(spec.seed);
      std::bernoulli_distribution edge(spec.probability);
      for (std::size_t a = 0; a < agents; ++a) {
        for (std::size_t b = a + 1; b < agents; ++b) {
          if (edge(rng)) link(a, b);
        }
      }
      break;
    }
  }

  Topology t(agents, std::move(adjacency), std::move(labels));
  if (spec.kind == TopologyKind::ErdosRenyi && !benign_subgraph_connected(t)) {
    throw InvalidInput("Erdos-Renyi draw left the benign agents disconnected");
  }
  return t;
}

void CombinationMatrix::validate() const {
  if (weights.rows() != weights.cols() || weights.rows() == 0) {
    throw InvalidInput("combination matrix must be square and non-empty");
  }
  if (!weights.allFinite() || (weights.array() < 0.0).any()) {
    throw InvalidInput("combination weights must be finite and non-negative");
  }
  for (Eigen::Index k = 0; k < weights.cols(); ++k) {
    if (std::abs(weights.col(k).sum() - 1.0) > 1e-12) {
      throw InvalidInput("combination matrix column " + std::to_string(k) + " does not sum to one");
    }
  }
}

CombinationMatrix uniform_combination(const Topology& t) {
  const auto n = static_cast<Eigen::Index>(t.size());
  CombinationMatrix A{Eigen::MatrixXd::Zero(n, n)};
  for (std::size_t k = 0; k < t.size(); ++k) {
    const auto hood = t.neighborhood(k);
    const double share = 1.0 / static_cast<double>(hood.size());
    for (std::size_t l : hood) A.weights(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(k)) = share;
  }
  return A;
}

std::string Assumption1Report::describe() const {
  std::ostringstream os;
  if (passed()) {
    os << "contamination assumption holds (epsilon = " << epsilon << ")";
    return os.str();
  }
  os << "contamination assumption violated (epsilon = " << epsilon << "): ";
  const char* sep = "";
  if (!benign_connected) {
    os << "benign subgraph disconnected";
    sep = "; ";
  }
  for (const auto& v : violations) {
    os << sep << "agent " << v.agent << " has " << v.benign_neighbors << "/" << v.neighborhood_size
       << " benign neighbors";
    sep = "; ";
  }
  return os.str();
}

Assumption1Report validate_assumption1(const Topology& t, double epsilon) {
  if (!std::isfinite(epsilon) || epsilon < 0.0 || epsilon >= 0.5) {
    throw InvalidInput("epsilon must lie in [0, 0.5)");
  }
  Assumption1Report report;
  report.epsilon = epsilon;
  for (std::size_t k : t.benign_agents()) {
    const auto hood = t.neighborhood(k);
    std::size_t benign = 0;
    for (std::size_t l : hood) benign += t.is_malicious(l) ? 0 : 1;
    const double ratio = static_cast<double>(benign) / static_cast<double>(hood.size());
    if (benign < hood.size() && !(ratio > 1.0 - epsilon)) report.violations.push_back({k, benign, hood.size()});
  }
  report.benign_connected = benign_subgraph_connected(t);
  return report;
}

BenignReduction benign_reduced_matrix(const CombinationMatrix& A, const Topology& t) {
  A.validate();
  if (A.size() != t.size()) throw InvalidInput("combination matrix and topology differ in size");
  BenignReduction out;
  out.agents = t.benign_agents();
  const auto n = static_cast<Eigen::Index>(out.agents.size());
  if (n == 0) throw InvalidInput("no benign agents");
  out.matrix.weights = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index c = 0; c < n; ++c) {
    const auto k = static_cast<Eigen::Index>(out.agents[static_cast<std::size_t>(c)]);
    double mass = 0.0;
    for (std::size_t l : out.agents) mass += A.weights(static_cast<Eigen::Index>(l), k);
    if (!(mass > 0.0)) {
      throw InvalidInput("benign neighborhood of agent " + std::to_string(k) + " carries no weight");
    }
    for (Eigen::Index r = 0; r < n; ++r) {
      const auto l = static_cast<Eigen::Index>(out.agents[static_cast<std::size_t>(r)]);
      out.matrix.weights(r, c) = A.weights(l, k) / mass;
    }
  }
  return out;
}

Eigen::MatrixXd benign_effective_weights(const CombinationMatrix& A, const Topology& t) {
  const BenignReduction reduced = benign_reduced_matrix(A, t);
  const auto n = static_cast<Eigen::Index>(t.size());
  Eigen::MatrixXd full = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t c = 0; c < reduced.agents.size(); ++c) {
    for (std::size_t r = 0; r < reduced.agents.size(); ++r) {
      full(static_cast<Eigen::Index>(reduced.agents[r]), static_cast<Eigen::Index>(reduced.agents[c])) =
          reduced.matrix.weights(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
  }
  return full;
}

Eigen::VectorXd perron_vector(const CombinationMatrix& Ab) {
  Ab.validate();
  const Eigen::Index n = Ab.weights.rows();
  Eigen::VectorXd p = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  for (int iter = 0; iter < kPerronMaxIters; ++iter) {
    Eigen::VectorXd next = Ab.weights * p;
    next /= next.sum();
    const double change = (next - p).lpNorm<Eigen::Infinity>();
    p = std::move(next);
    if (change <= kPerronTol) {
      const double residual = (Ab.weights * p - p).lpNorm<Eigen::Infinity>();
      if (residual > 1e-10 || !(p.minCoeff() > 0.0)) {
        throw ConvergenceFailure("power iteration settled on a non-positive or inexact vector");
      }
      return p;
    }
  }
  throw ConvergenceFailure("power iteration did not converge; combination matrix is not primitive");
}

}  // namespace refdiff
