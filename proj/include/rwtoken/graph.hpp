#pragma once

#include <Eigen/Dense>

#include <span>
#include <utility>
#include <vector>

#include "rwtoken/common.hpp"

namespace rwtoken {

/// Unordered node pair, stored with a < b.
struct Edge {
  NodeId a = 0;
  NodeId b = 0;

  Edge() = default;
  Edge(NodeId u, NodeId v) : a(u < v ? u : v), b(u < v ? v : u) {}

  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Simple undirected graph over nodes 0..n-1. Adjacency lists are kept sorted.
class StaticGraph {
 public:
  StaticGraph() = default;
  explicit StaticGraph(std::size_t n);
  /// Throws InvalidInput on self-loops, parallel edges or out-of-range ids.
  StaticGraph(std::size_t n, std::span<const Edge> edges);

  std::size_t node_count() const { return adjacency_.size(); }
  std::size_t edge_count() const { return edge_count_; }
  std::size_t degree(NodeId i) const { return adjacency_.at(i).size(); }
  std::span<const NodeId> neighbors(NodeId i) const { return adjacency_.at(i); }
  bool has_edge(NodeId i, NodeId j) const;

  /// Returns false if the edge was already present.
  bool add_edge(NodeId i, NodeId j);
  /// Returns false if the edge was absent.
  bool remove_edge(NodeId i, NodeId j);

  std::vector<Edge> edges() const;

  friend bool operator==(const StaticGraph&, const StaticGraph&) = default;

 private:
  void check_node(NodeId i) const;

  std::vector<std::vector<NodeId>> adjacency_;
  std::size_t edge_count_ = 0;
};

struct GraphDiagnostics {
  bool connected = false;
  bool bipartite = false;
  std::size_t components = 0;
};

/// Connectivity (BFS) and bipartiteness (2-coloring). Token meeting is not
/// guaranteed on bipartite graphs.
GraphDiagnostics validate_graph(const StaticGraph& g);

/// Simple random walk matrix. An isolated node keeps the token (P_ii = 1).
Eigen::MatrixXd walk_matrix(const StaticGraph& g);

/// Probability weights over the states of a DynamicGraphProcess.
class GraphDistribution {
 public:
  /// Throws InvalidInput unless weights are non-negative and sum to 1 within 1e-12.
  explicit GraphDistribution(Eigen::VectorXd weights);

  const Eigen::VectorXd& weights() const { return weights_; }
  std::size_t size() const { return static_cast<std::size_t>(weights_.size()); }
  double operator[](std::size_t k) const { return weights_(static_cast<Eigen::Index>(k)); }

 private:
  Eigen::VectorXd weights_;
};

/// Finite set of graph states on a fixed node set, evolving as a homogeneous
/// Markov chain. States are referenced by index.
class DynamicGraphProcess {
 public:
  /// Throws InvalidInput if node counts differ or a row is not stochastic.
  DynamicGraphProcess(std::vector<StaticGraph> states, Eigen::MatrixXd transitions);

  /// One-state process that never changes.
  static DynamicGraphProcess constant(StaticGraph g);

  std::size_t state_count() const { return states_.size(); }
  std::size_t node_count() const { return states_.front().node_count(); }
  const StaticGraph& state(std::size_t k) const { return states_.at(k); }
  const std::vector<StaticGraph>& states() const { return states_; }
  const Eigen::MatrixXd& transitions() const { return transitions_; }

 private:
  std::vector<StaticGraph> states_;
  Eigen::MatrixXd transitions_;
};

/// Stationary distribution of the graph-state chain. Direct solve for up to 64
/// states, power iteration above. Throws NumericalError("no unique stationary
/// distribution") when neither route yields a residual <= 1e-12.
GraphDistribution stationary_distribution(const DynamicGraphProcess& p);

/// Stationary distribution of an arbitrary row-stochastic matrix.
Eigen::VectorXd stationary_vector(const Eigen::MatrixXd& transitions);

/// p̄_ij = sum_G pi(G) p_ij(G). Throws InvalidInput on dimension mismatch.
Eigen::MatrixXd averaged_transition_matrix(const DynamicGraphProcess& p,
                                           const GraphDistribution& pi);

/// Samples the successor of `current` from its transition row.
std::size_t sample_next_graph(const DynamicGraphProcess& p, std::size_t current, Rng& rng);

// Named families used as fixtures.
StaticGraph path_graph(std::size_t n);
StaticGraph cycle_graph(std::size_t n);
StaticGraph complete_graph(std::size_t n);
/// Random spanning tree plus each remaining pair independently with `extra_edge_p`.
StaticGraph random_connected_graph(std::size_t n, double extra_edge_p, Rng& rng);

}  // namespace rwtoken
