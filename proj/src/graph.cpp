#include "rwtoken/graph.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <string>

namespace rwtoken {

namespace {

constexpr double kStochasticTol = 1e-12;
constexpr double kStationaryTol = 1e-12;
constexpr std::size_t kDirectSolveMaxStates = 64;
constexpr std::size_t kPowerIterationCap = 1'000'000;

double stationary_residual(const Eigen::MatrixXd& transitions, const Eigen::VectorXd& pi) {
  Eigen::VectorXd moved = transitions.transpose() * pi;
  return (moved - pi).lpNorm<Eigen::Infinity>();
}

}  // namespace

StaticGraph::StaticGraph(std::size_t n) : adjacency_(n) {}

StaticGraph::StaticGraph(std::size_t n, std::span<const Edge> edges) : adjacency_(n) {
  for (const Edge& e : edges) {
    if (e.a == e.b) throw InvalidInput("self-loop on node " + std::to_string(e.a));
    if (!add_edge(e.a, e.b)) {
      throw InvalidInput("parallel edge (" + std::to_string(e.a) + "," + std::to_string(e.b) + ")");
    }
  }
}

void StaticGraph::check_node(NodeId i) const {
  if (i >= adjacency_.size()) {
    throw InvalidInput("node id " + std::to_string(i) + " out of range for n=" +
                       std::to_string(adjacency_.size()));
  }
}

bool StaticGraph::has_edge(NodeId i, NodeId j) const {
  if (i >= adjacency_.size() || j >= adjacency_.size()) return false;
  const auto& row = adjacency_[i];
  return std::binary_search(row.begin(), row.end(), j);
}

bool StaticGraph::add_edge(NodeId i, NodeId j) {
  check_node(i);
  check_node(j);
  if (i == j) throw InvalidInput("self-loop on node " + std::to_string(i));
  if (has_edge(i, j)) return false;
  auto insert_sorted = [](std::vector<NodeId>& row, NodeId v) {
    row.insert(std::lower_bound(row.begin(), row.end(), v), v);
  };
  insert_sorted(adjacency_[i], j);
  insert_sorted(adjacency_[j], i);
  ++edge_count_;
  return true;
}

bool StaticGraph::remove_edge(NodeId i, NodeId j) {
  if (!has_edge(i, j)) return false;
  auto erase_sorted = [](std::vector<NodeId>& row, NodeId v) {
    row.erase(std::lower_bound(row.begin(), row.end(), v));
  };
  erase_sorted(adjacency_[i], j);
  erase_sorted(adjacency_[j], i);
  --edge_count_;
  return true;
}

std::vector<Edge> StaticGraph::edges() const {
  std::vector<Edge> out;
  out.reserve(edge_count_);
  for (NodeId i = 0; i < adjacency_.size(); ++i) {
    for (NodeId j : adjacency_[i]) {
      if (i < j) out.emplace_back(i, j);
    }
  }
  return out;
}

GraphDiagnostics validate_graph(const StaticGraph& g) {
  const std::size_t n = g.node_count();
  GraphDiagnostics d;
  d.bipartite = true;
  std::vector<int> color(n, -1);
  for (NodeId s = 0; s < n; ++s) {
    if (color[s] != -1) continue;
    ++d.components;
    color[s] = 0;
    std::queue<NodeId> frontier;
    frontier.push(s);
    while (!frontier.empty()) {
      NodeId u = frontier.front();
      frontier.pop();
      for (NodeId v : g.neighbors(u)) {
        if (color[v] == -1) {
          color[v] = 1 - color[u];
          frontier.push(v);
        } else if (color[v] == color[u]) {
          d.bipartite = false;
        }
      }
    }
  }
  d.connected = d.components <= 1;
  return d;
}

Eigen::MatrixXd walk_matrix(const StaticGraph& g) {
  const auto n = static_cast<Eigen::Index>(g.node_count());
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (NodeId i = 0; i < g.node_count(); ++i) {
    auto nbrs = g.neighbors(i);
    if (nbrs.empty()) {
      p(i, i) = 1.0;
      continue;
    }
    const double w = 1.0 / static_cast<double>(nbrs.size());
    for (NodeId j : nbrs) p(i, j) = w;
  }
  return p;
}

GraphDistribution::GraphDistribution(Eigen::VectorXd weights) : weights_(std::move(weights)) {
  if (weights_.size() == 0) throw InvalidInput("empty graph distribution");
  if ((weights_.array() < 0.0).any()) throw InvalidInput("negative graph distribution weight");
  if (std::abs(weights_.sum() - 1.0) > kStochasticTol) {
    throw InvalidInput("graph distribution weights do not sum to 1");
  }
}

DynamicGraphProcess::DynamicGraphProcess(std::vector<StaticGraph> states, Eigen::MatrixXd transitions)
    : states_(std::move(states)), transitions_(std::move(transitions)) {
  if (states_.empty()) throw InvalidInput("dynamic graph process has no states");
  const auto k = static_cast<Eigen::Index>(states_.size());
  if (transitions_.rows() != k || transitions_.cols() != k) {
    throw InvalidInput("transition matrix must be " + std::to_string(k) + "x" + std::to_string(k));
  }
  for (const auto& s : states_) {
    if (s.node_count() != states_.front().node_count()) {
      throw InvalidInput("graph states have different node counts");
    }
  }
  for (Eigen::Index r = 0; r < k; ++r) {
    if ((transitions_.row(r).array() < 0.0).any()) {
      throw InvalidInput("negative transition probability in row " + std::to_string(r));
    }
    if (std::abs(transitions_.row(r).sum() - 1.0) > kStochasticTol) {
      throw InvalidInput("transition row " + std::to_string(r) + " does not sum to 1");
    }
  }
}

DynamicGraphProcess DynamicGraphProcess::constant(StaticGraph g) {
  std::vector<StaticGraph> states;
  states.push_back(std::move(g));
  return DynamicGraphProcess(std::move(states), Eigen::MatrixXd::Ones(1, 1));
}

Eigen::VectorXd stationary_vector(const Eigen::MatrixXd& transitions) {
  const Eigen::Index k = transitions.rows();
  const auto fail = [] { return NumericalError("no unique stationary distribution"); };

  Eigen::VectorXd pi;
  if (static_cast<std::size_t>(k) <= kDirectSolveMaxStates) {
    // (P^T - I) pi = 0 with the last equation replaced by sum(pi) = 1.
    Eigen::MatrixXd a = transitions.transpose() - Eigen::MatrixXd::Identity(k, k);
    a.row(k - 1).setOnes();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
    rhs(k - 1) = 1.0;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
    if (!lu.isInvertible()) throw fail();
    pi = lu.solve(rhs);
    // One step of iterative refinement.
    pi += lu.solve(rhs - a * pi);
  } else {
    pi = Eigen::VectorXd::Constant(k, 1.0 / static_cast<double>(k));
    bool converged = false;
    for (std::size_t it = 0; it < kPowerIterationCap; ++it) {
      Eigen::VectorXd next = transitions.transpose() * pi;
      next /= next.sum();
      const double delta = (next - pi).lpNorm<Eigen::Infinity>();
      pi = std::move(next);
      if (delta <= kStationaryTol) {
        converged = true;
        break;
      }
    }
    if (!converged) throw fail();
  }

  // Round-off can leave tiny negatives on states with zero mass.
  for (Eigen::Index s = 0; s < k; ++s) {
    if (pi(s) < 0.0) {
      if (pi(s) < -1e-9) throw fail();
      pi(s) = 0.0;
    }
  }
  pi /= pi.sum();
  if (stationary_residual(transitions, pi) > kStationaryTol) throw fail();
  return pi;
}

GraphDistribution stationary_distribution(const DynamicGraphProcess& p) {
  return GraphDistribution(stationary_vector(p.transitions()));
}

Eigen::MatrixXd averaged_transition_matrix(const DynamicGraphProcess& p,
                                           const GraphDistribution& pi) {
  if (pi.size() != p.state_count()) {
    throw InvalidInput("distribution has " + std::to_string(pi.size()) + " weights for " +
                       std::to_string(p.state_count()) + " graph states");
  }
  const auto n = static_cast<Eigen::Index>(p.node_count());
  Eigen::MatrixXd avg = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t k = 0; k < p.state_count(); ++k) {
    if (pi[k] == 0.0) continue;
    avg += pi[k] * walk_matrix(p.state(k));
  }
  return avg;
}

std::size_t sample_next_graph(const DynamicGraphProcess& p, std::size_t current, Rng& rng) {
  if (current >= p.state_count()) throw InvalidInput("graph state index out of range");
  if (p.state_count() == 1) return 0;
  const auto row = p.transitions().row(static_cast<Eigen::Index>(current));
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t last_positive = current;
  for (Eigen::Index s = 0; s < row.size(); ++s) {
    if (row(s) <= 0.0) continue;
    acc += row(s);
    last_positive = static_cast<std::size_t>(s);
    if (u < acc) return last_positive;
  }
  return last_positive;
}

StaticGraph path_graph(std::size_t n) {
  StaticGraph g(n);
  for (NodeId i = 0; i + 1 < n; ++i) g.add_edge(i, i + 1);
  return g;
}

StaticGraph cycle_graph(std::size_t n) {
  if (n < 3) throw InvalidInput("a cycle needs at least 3 nodes");
  StaticGraph g = path_graph(n);
  g.add_edge(static_cast<NodeId>(n - 1), 0);
  return g;
}

StaticGraph complete_graph(std::size_t n) {
  StaticGraph g(n);
  for (NodeId i = 0; i < n; ++i) {
    for (NodeId j = i + 1; j < n; ++j) g.add_edge(i, j);
  }
  return g;
}

StaticGraph random_connected_graph(std::size_t n, double extra_edge_p, Rng& rng) {
  StaticGraph g(n);
  // Random recursive tree over a shuffled order, then independent extra edges.
  std::vector<NodeId> order(n);
  for (NodeId i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 1; k < n; ++k) {
    g.add_edge(order[k], order[uniform_index(rng, k)]);
  }
  for (NodeId i = 0; i < n; ++i) {
    for (NodeId j = i + 1; j < n; ++j) {
      if (!g.has_edge(i, j) && bernoulli(rng, extra_edge_p)) g.add_edge(i, j);
    }
  }
  return g;
}

}  // namespace rwtoken
