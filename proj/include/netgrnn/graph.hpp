#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace netgrnn::graph {

/// Directed edge `from -> to`: node `to` receives information from node `from`.
struct Edge {
  std::size_t from;
  std::size_t to;
  auto operator<=>(const Edge&) const = default;
};

/// Directed interconnection topology over nodes 0..N-1. Self-loops are never
/// stored; self-dependence is implicit everywhere.
class Topology {
 public:
  Topology() = default;
  Topology(std::size_t node_count, std::vector<Edge> edges);

  static Topology empty(std::size_t node_count);
  /// Undirected path 0-1-...-(N-1).
  static Topology path(std::size_t node_count);
  static Topology complete(std::size_t node_count);
  static Topology ring(std::size_t node_count);

  std::size_t size() const noexcept { return node_count_; }
  /// Canonical (lexicographically sorted, deduplicated) edge list.
  const std::vector<Edge>& edges() const noexcept { return edges_; }
  /// In-neighbours N_i, sorted ascending.
  std::span<const std::size_t> neighbors(std::size_t node) const;
  std::size_t degree(std::size_t node) const { return neighbors(node).size(); }
  std::size_t max_degree() const;
  bool has_edge(std::size_t from, std::size_t to) const;
  /// True when j is in N_i or j == i.
  bool is_local(std::size_t i, std::size_t j) const { return i == j || has_edge(j, i); }

  bool is_undirected() const;
  /// Ignoring direction, every node reachable from node 0 (BFS).
  bool is_connected() const;
  Topology symmetrized() const;

  bool operator==(const Topology& other) const {
    return node_count_ == other.node_count_ && edges_ == other.edges_;
  }

 private:
  std::size_t node_count_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<std::size_t>> in_neighbors_;
};

enum class ShiftKind { adjacency, normalized_adjacency, laplacian, normalized_laplacian };

ShiftKind parse_shift_kind(const std::string& name);
std::string to_string(ShiftKind kind);

struct ShiftOperator {
  ShiftKind kind = ShiftKind::adjacency;
  Eigen::MatrixXd matrix;
};

/// Row-stochastic mixing matrix used by the consensus step.
struct ConsensusMatrix {
  Eigen::MatrixXd matrix;
};

/// Gaussian random partition graph: cluster sizes from a rounded normal around
/// N / cluster_count, intra-cluster edges with `p_in`, inter-cluster with `p_out`,
/// symmetrised, then connected components chained through their lowest node.
Topology generate_random_partition_graph(std::size_t node_count, std::size_t cluster_count,
                                         double p_in, double p_out, std::uint64_t seed);

/// Laplacians use in-degrees, which equals the symmetric Laplacian on undirected
/// graphs. Normalised kinds divide by the largest eigenvalue modulus.
ShiftOperator shift_operator(const Topology& topology, ShiftKind kind);

/// W_ij = 1 / max(d_i, d_j) on edges, W_ii = 1 - sum_k W_ik. Requires an
/// undirected topology.
ConsensusMatrix metropolis_hastings_weights(const Topology& topology);

/// Spectral radius of a real square matrix (largest eigenvalue modulus).
double spectral_radius(const Eigen::MatrixXd& m);

nlohmann::json to_json(const Topology& topology);
Topology topology_from_json(const nlohmann::json& doc);

}  // namespace netgrnn::graph
