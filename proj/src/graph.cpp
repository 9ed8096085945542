#include "netgrnn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <string>

#include <Eigen/Eigenvalues>

#include "netgrnn/errors.hpp"
#include "netgrnn/rng.hpp"

namespace netgrnn::graph {

Topology::Topology(std::size_t node_count, std::vector<Edge> edges)
    : node_count_(node_count), in_neighbors_(node_count) {
  if (node_count == 0) throw InvalidArgument("topology needs at least one node");
  for (const Edge& e : edges) {
    if (e.from >= node_count || e.to >= node_count)
      throw InvalidArgument("edge index out of range");
    if (e.from == e.to) throw InvalidArgument("self-loops are not stored in a topology");
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  edges_ = std::move(edges);
  for (const Edge& e : edges_) in_neighbors_[e.to].push_back(e.from);
  for (auto& list : in_neighbors_) std::sort(list.begin(), list.end());
}

Topology Topology::empty(std::size_t node_count) { return Topology(node_count, {}); }

Topology Topology::path(std::size_t node_count) {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i + 1 < node_count; ++i) {
    edges.push_back({i, i + 1});
    edges.push_back({i + 1, i});
  }
  return Topology(node_count, std::move(edges));
}

Topology Topology::complete(std::size_t node_count) {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < node_count; ++i)
    for (std::size_t j = 0; j < node_count; ++j)
      if (i != j) edges.push_back({i, j});
  return Topology(node_count, std::move(edges));
}

Topology Topology::ring(std::size_t node_count) {
  std::vector<Edge> edges;
  if (node_count >= 2) {
    for (std::size_t i = 0; i < node_count; ++i) {
      const std::size_t j = (i + 1) % node_count;
      edges.push_back({i, j});
      edges.push_back({j, i});
    }
  }
  return Topology(node_count, std::move(edges));
}

std::span<const std::size_t> Topology::neighbors(std::size_t node) const {
  if (node >= node_count_) throw InvalidArgument("node index out of range");
  return in_neighbors_[node];
}

std::size_t Topology::max_degree() const {
  std::size_t best = 0;
  for (const auto& list : in_neighbors_) best = std::max(best, list.size());
  return best;
}

bool Topology::has_edge(std::size_t from, std::size_t to) const {
  if (to >= node_count_) return false;
  const auto& list = in_neighbors_[to];
  return std::binary_search(list.begin(), list.end(), from);
}

bool Topology::is_undirected() const {
  return std::all_of(edges_.begin(), edges_.end(),
                     [&](const Edge& e) { return has_edge(e.to, e.from); });
}

bool Topology::is_connected() const {
  if (node_count_ == 0) return true;
  std::vector<std::vector<std::size_t>> adj(node_count_);
  for (const Edge& e : edges_) {
    adj[e.from].push_back(e.to);
    adj[e.to].push_back(e.from);
  }
  std::vector<bool> seen(node_count_, false);
  std::queue<std::size_t> frontier;
  frontier.push(0);
  seen[0] = true;
  std::size_t count = 1;
  while (!frontier.empty()) {
    const std::size_t v = frontier.front();
    frontier.pop();
    for (std::size_t w : adj[v]) {
      if (!seen[w]) {
        seen[w] = true;
        ++count;
        frontier.push(w);
      }
    }
  }
  return count == node_count_;
}

Topology Topology::symmetrized() const {
  std::vector<Edge> edges = edges_;
  for (const Edge& e : edges_) edges.push_back({e.to, e.from});
  return Topology(node_count_, std::move(edges));
}

ShiftKind parse_shift_kind(const std::string& name) {
  if (name == "adjacency") return ShiftKind::adjacency;
  if (name == "normalized_adjacency") return ShiftKind::normalized_adjacency;
  if (name == "laplacian") return ShiftKind::laplacian;
  if (name == "normalized_laplacian") return ShiftKind::normalized_laplacian;
  throw InvalidArgument("unknown shift operator kind: " + name);
}

std::string to_string(ShiftKind kind) {
  switch (kind) {
    case ShiftKind::adjacency: return "adjacency";
    case ShiftKind::normalized_adjacency: return "normalized_adjacency";
    case ShiftKind::laplacian: return "laplacian";
    case ShiftKind::normalized_laplacian: return "normalized_laplacian";
  }
  return "adjacency";
}

namespace {

std::vector<std::size_t> partition_sizes(std::size_t node_count, std::size_t cluster_count,
                                         Rng& rng) {
  const double mean = static_cast<double>(node_count) / static_cast<double>(cluster_count);
  std::normal_distribution<double> normal(mean, std::sqrt(mean));
  std::vector<std::size_t> sizes(cluster_count);
  for (auto& s : sizes) s = static_cast<std::size_t>(std::max(1.0, std::round(normal(rng))));
  // Repair the total by nudging clusters chosen uniformly at random.
  std::uniform_int_distribution<std::size_t> pick(0, cluster_count - 1);
  std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  while (total > node_count) {
    std::size_t c = pick(rng);
    if (sizes[c] > 1) {
      --sizes[c];
      --total;
    }
  }
  while (total < node_count) {
    ++sizes[pick(rng)];
    ++total;
  }
  return sizes;
}

}  // namespace

Topology generate_random_partition_graph(std::size_t node_count, std::size_t cluster_count,
                                         double p_in, double p_out, std::uint64_t seed) {
  if (node_count == 0) throw InvalidArgument("random partition graph needs N >= 1");
  if (cluster_count == 0 || cluster_count > node_count)
    throw InvalidArgument("cluster_count must be in [1, N]");
  if (!(p_in >= 0.0 && p_in <= 1.0) || !(p_out >= 0.0 && p_out <= 1.0))
    throw InvalidArgument("edge probabilities must lie in [0, 1]");

  Rng rng = make_rng(seed, Stream::topology);
  const auto sizes = partition_sizes(node_count, cluster_count, rng);
  std::vector<std::size_t> cluster_of(node_count);
  std::size_t next = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c)
    for (std::size_t k = 0; k < sizes[c]; ++k) cluster_of[next++] = c;

  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < node_count; ++i) {
    for (std::size_t j = i + 1; j < node_count; ++j) {
      const double p = cluster_of[i] == cluster_of[j] ? p_in : p_out;
      if (uniform(rng) < p) {
        edges.push_back({i, j});
        edges.push_back({j, i});
      }
    }
  }

  // Union-find over the undirected edges, then chain component representatives.
  std::vector<std::size_t> parent(node_count);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  auto find = [&](std::size_t v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  for (const Edge& e : edges) parent[find(e.from)] = find(e.to);
  std::vector<std::size_t> reps;
  std::vector<bool> seen(node_count, false);
  for (std::size_t v = 0; v < node_count; ++v) {
    const std::size_t r = find(v);
    if (!seen[r]) {
      seen[r] = true;
      reps.push_back(v);
    }
  }
  for (std::size_t k = 0; k + 1 < reps.size(); ++k) {
    edges.push_back({reps[k], reps[k + 1]});
    edges.push_back({reps[k + 1], reps[k]});
  }
  return Topology(node_count, std::move(edges));
}

double spectral_radius(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::EigenSolver<Eigen::MatrixXd> solver(m, false);
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

ShiftOperator shift_operator(const Topology& topology, ShiftKind kind) {
  const auto n = static_cast<Eigen::Index>(topology.size());
  Eigen::MatrixXd adj = Eigen::MatrixXd::Zero(n, n);
  for (const Edge& e : topology.edges())
    adj(static_cast<Eigen::Index>(e.to), static_cast<Eigen::Index>(e.from)) = 1.0;

  Eigen::MatrixXd s;
  switch (kind) {
    case ShiftKind::adjacency:
    case ShiftKind::normalized_adjacency: s = adj; break;
    case ShiftKind::laplacian:
    case ShiftKind::normalized_laplacian: {
      s = -adj;
      s.diagonal() = adj.rowwise().sum();
      break;
    }
  }
  if (kind == ShiftKind::normalized_adjacency || kind == ShiftKind::normalized_laplacian) {
    const double rho = spectral_radius(s);
    if (rho > 0.0) s /= rho;
  }
  return {kind, std::move(s)};
}

ConsensusMatrix metropolis_hastings_weights(const Topology& topology) {
  if (!topology.is_undirected())
    throw InvalidArgument("Metropolis-Hastings weights need an undirected communication graph");
  const auto n = static_cast<Eigen::Index>(topology.size());
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    double off = 0.0;
    for (std::size_t j : topology.neighbors(ui)) {
      const double value =
          1.0 / static_cast<double>(std::max(topology.degree(ui), topology.degree(j)));
      w(i, static_cast<Eigen::Index>(j)) = value;
      off += value;
    }
    w(i, i) = 1.0 - off;
  }
  return {std::move(w)};
}

nlohmann::json to_json(const Topology& topology) {
  nlohmann::json edges = nlohmann::json::array();
  for (const Edge& e : topology.edges()) edges.push_back({e.from, e.to});
  return {{"n", topology.size()}, {"edges", std::move(edges)}};
}

Topology topology_from_json(const nlohmann::json& doc) {
  try {
    const auto n = doc.at("n").get<std::size_t>();
    std::vector<Edge> edges;
    for (const auto& e : doc.at("edges")) {
      if (!e.is_array() || e.size() != 2) throw InvalidArgument("edge entries must be [j, i]");
      edges.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>()});
    }
    return Topology(n, std::move(edges));
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidArgument(std::string("malformed topology document: ") + ex.what());
  }
}

}  // namespace netgrnn::graph
