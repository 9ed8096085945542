#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <json.hpp>

#include "netgrnn/graph.hpp"
#include "netgrnn/rng.hpp"

namespace netgrnn::plant {

using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Networked LTI plant x(t+1) = A x(t) + B u(t) + w(t) over stacked vectors
/// x = vec(X^T). Blocks A_ij, B_ij vanish unless j is in N_i or j == i.
class NetworkedSystem {
 public:
  NetworkedSystem() = default;
  NetworkedSystem(graph::Topology topology, std::size_t state_dim, std::size_t input_dim,
                  Eigen::MatrixXd a, Eigen::MatrixXd b, double noise_std);

  const graph::Topology& topology() const noexcept { return topology_; }
  std::size_t nodes() const noexcept { return topology_.size(); }
  std::size_t state_dim() const noexcept { return state_dim_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t state_size() const noexcept { return nodes() * state_dim_; }
  std::size_t input_size() const noexcept { return nodes() * input_dim_; }
  const Eigen::MatrixXd& a() const noexcept { return a_; }
  const Eigen::MatrixXd& b() const noexcept { return b_; }
  const SparseRowMatrix& a_sparse() const noexcept { return a_sparse_; }
  const SparseRowMatrix& b_sparse() const noexcept { return b_sparse_; }
  double noise_std() const noexcept { return noise_std_; }

  Eigen::MatrixXd a_block(std::size_t i, std::size_t j) const;
  Eigen::MatrixXd b_block(std::size_t i, std::size_t j) const;

 private:
  graph::Topology topology_;
  std::size_t state_dim_ = 0;
  std::size_t input_dim_ = 0;
  Eigen::MatrixXd a_;
  Eigen::MatrixXd b_;
  SparseRowMatrix a_sparse_;
  SparseRowMatrix b_sparse_;
  double noise_std_ = 0.0;
};

/// Standard-normal entries on the topology's block pattern, A scaled to spectral
/// norm `scale`, B to spectral norm 1; redrawn until (A, B) is controllable.
NetworkedSystem generate_system(const graph::Topology& topology, std::size_t state_dim,
                                std::size_t input_dim, double scale, double noise_std,
                                std::uint64_t seed, int max_attempts = 100);

/// One plant step; noise for node i is drawn from `node_rngs[i]`. An empty span
/// (or zero noise_std) gives the exact map A x + B u.
Eigen::VectorXd step(const NetworkedSystem& sys, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& u, std::span<Rng> node_rngs);
/// Same, drawing every node's noise from a single stream in node order.
Eigen::VectorXd step(const NetworkedSystem& sys, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& u, Rng& rng);
/// Node i's next state, touching only blocks of its plant neighbourhood.
Eigen::VectorXd node_step(const NetworkedSystem& sys, std::size_t node, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& u, Rng* node_rng);

/// Numerical rank of [B, AB, ..., A^{K-1} B] (SVD, tolerance 1e-9 relative).
/// For K = nN > 50 a PBH test at the eigenvalues of A is used instead.
std::size_t controllability_rank(const NetworkedSystem& sys);
std::size_t controllability_rank(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
std::size_t controllability_rank_svd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
/// min over eigenvalues lambda of rank [A - lambda I, B].
std::size_t controllability_rank_pbh(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

struct LqrSolution {
  Eigen::MatrixXd p;  // Riccati fixed point
  Eigen::MatrixXd k;  // u = -K x
  Eigen::MatrixXd state_weight;
  Eigen::MatrixXd input_weight;
  Eigen::MatrixXd terminal_weight;
  int iterations = 0;
};

/// Backward Riccati iteration from the terminal weight to its fixed point
/// (tolerance 1e-10, at most 1e5 iterations).
LqrSolution solve_lqr(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                      const Eigen::MatrixXd& state_weight, const Eigen::MatrixXd& input_weight,
                      const Eigen::MatrixXd& terminal_weight);
LqrSolution solve_lqr(const NetworkedSystem& sys, const Eigen::MatrixXd& state_weight,
                      const Eigen::MatrixXd& input_weight,
                      const Eigen::MatrixXd& terminal_weight);
/// Spectral norm of the discrete algebraic Riccati residual at `p`.
double riccati_residual(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                        const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                        const Eigen::MatrixXd& p);

/// Stateful state-feedback policy. `reset` clears any internal memory.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual Eigen::VectorXd control(const Eigen::VectorXd& x) = 0;
  virtual void reset() {}
};

class ZeroController final : public Controller {
 public:
  explicit ZeroController(std::size_t input_size) : input_size_(input_size) {}
  Eigen::VectorXd control(const Eigen::VectorXd&) override {
    return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(input_size_));
  }

 private:
  std::size_t input_size_;
};

/// u = -K x.
class LinearFeedback final : public Controller {
 public:
  explicit LinearFeedback(Eigen::MatrixXd gain) : gain_(std::move(gain)) {}
  Eigen::VectorXd control(const Eigen::VectorXd& x) override { return -gain_ * x; }

 private:
  Eigen::MatrixXd gain_;
};

struct Trajectory {
  std::size_t nodes = 0;
  std::size_t state_dim = 0;
  std::size_t input_dim = 0;
  std::vector<Eigen::VectorXd> states;    // T + 1 stacked states
  std::vector<Eigen::VectorXd> controls;  // T stacked controls

  std::size_t horizon() const noexcept { return controls.size(); }
  Eigen::VectorXd node_state(std::size_t t, std::size_t node) const;
  Eigen::VectorXd node_control(std::size_t t, std::size_t node) const;
  /// X(t) as an N x n matrix (rows are node states).
  Eigen::MatrixXd state_matrix(std::size_t t) const;
};

/// Drives the plant for T steps under `controller`. Noise is drawn per node from
/// `node_rngs` when non-empty.
Trajectory rollout(const NetworkedSystem& sys, Controller& controller, const Eigen::VectorXd& x0,
                   std::size_t horizon, std::span<Rng> node_rngs = {});

/// x(0) with i.i.d. N(mean, stddev^2) entries, node i drawn from `node_rngs[i]`.
Eigen::VectorXd sample_initial_state(std::size_t nodes, std::size_t state_dim, double mean,
                                     double stddev, std::span<Rng> node_rngs);

/// One RNG per node derived from (seed, stream, prefix..., node).
std::vector<Rng> node_streams(std::uint64_t seed, Stream stream, std::size_t nodes,
                              std::uint64_t a = 0, std::uint64_t b = 0);

/// sum_t x'Qx + u'Ru + x(T)' Qf x(T) on the stacked trajectory.
double quadratic_cost(const Trajectory& traj, const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                      const Eigen::MatrixXd& terminal);

nlohmann::json to_json(const NetworkedSystem& sys, const std::string& topology_ref = "");
NetworkedSystem system_from_json(const nlohmann::json& doc, const graph::Topology& topology);

/// CSV with header `t,node,x0..,u0..`; the final state row has empty controls.
void write_trajectory_csv(std::ostream& out, const Trajectory& traj);

}  // namespace netgrnn::plant
