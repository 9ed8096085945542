#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <queue>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "netgrnn/graph.hpp"
#include "netgrnn/grnn.hpp"
#include "netgrnn/plant.hpp"
#include "netgrnn/training.hpp"

namespace testutil {

inline Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                                     double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = d(rng);
  return m;
}

inline netgrnn::grnn::NodeWeights random_weights(std::size_t n, std::size_t m, std::size_t p,
                                                 std::mt19937_64& rng, double scale = 1.0) {
  auto e = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  netgrnn::grnn::NodeWeights w;
  w.theta1 = scale * random_matrix(e(p), e(p), rng);
  w.theta2 = scale * random_matrix(e(n), e(p), rng);
  w.theta3 = scale * random_matrix(e(n), e(p), rng);
  w.theta4 = scale * random_matrix(e(p), e(m), rng);
  return w;
}

/// Independent undirected reachability check from node 0 over an adjacency list
/// built straight from the edge list.
inline bool bfs_connected(const netgrnn::graph::Topology& t) {
  const std::size_t n = t.size();
  std::vector<std::vector<std::size_t>> adj(n);
  for (const auto& e : t.edges()) {
    adj[e.from].push_back(e.to);
    adj[e.to].push_back(e.from);
  }
  std::vector<char> seen(n, 0);
  std::queue<std::size_t> q;
  q.push(0);
  seen[0] = 1;
  std::size_t count = 1;
  while (!q.empty()) {
    std::size_t v = q.front();
    q.pop();
    for (std::size_t w : adj[v])
      if (!seen[w]) {
        seen[w] = 1;
        ++count;
        q.push(w);
      }
  }
  return count == n;
}

/// Random connected undirected topology: a random spanning tree plus extra
/// edges with probability `extra`.
inline netgrnn::graph::Topology random_connected(std::size_t n, double extra,
                                                 std::mt19937_64& rng) {
  std::vector<netgrnn::graph::Edge> edges;
  for (std::size_t v = 1; v < n; ++v) {
    std::uniform_int_distribution<std::size_t> pick(0, v - 1);
    std::size_t u = pick(rng);
    edges.push_back({u, v});
    edges.push_back({v, u});
  }
  std::bernoulli_distribution coin(extra);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b)
      if (coin(rng)) {
        edges.push_back({a, b});
        edges.push_back({b, a});
      }
  return netgrnn::graph::Topology(n, edges);
}

inline double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

inline double weights_diff(const netgrnn::grnn::NodeWeights& a,
                           const netgrnn::grnn::NodeWeights& b) {
  double d = 0.0;
  for (int k = 1; k <= 4; ++k) d = std::max(d, max_abs_diff(a.slot(k), b.slot(k)));
  return d;
}

/// Small training problem over an undirected topology with a random stable plant.
inline netgrnn::training::TrainingProblem small_problem(const netgrnn::graph::Topology& topo,
                                                        std::size_t n, std::size_t m,
                                                        std::size_t p, std::uint64_t seed,
                                                        double noise = 0.1) {
  using namespace netgrnn;
  training::TrainingProblem prob;
  prob.system = plant::generate_system(topo, n, m, 0.9, noise, seed);
  prob.communication = topo.symmetrized();
  prob.shift = graph::shift_operator(prob.communication, graph::ShiftKind::normalized_adjacency);
  prob.activation = grnn::Activation::tanh();
  prob.loss = training::LossConfig::identity(topo.size(), n, m, 4, 6);
  prob.config.epochs = 3;
  prob.config.test_samples = 3;
  prob.seed = seed;
  return prob;
}

}  // namespace testutil
