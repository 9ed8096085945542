#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <json.hpp>

#include "netgrnn/graph.hpp"
#include "netgrnn/plant.hpp"
#include "netgrnn/rng.hpp"

namespace netgrnn::grnn {

enum class ActivationKind { tanh, relu, leaky_relu, sigmoid };

/// Element-wise nonlinearity with its derivative. `leak` is the negative-side
/// slope of leaky_relu (0 for relu).
struct Activation {
  ActivationKind kind = ActivationKind::tanh;
  double leak = 0.0;

  static Activation tanh() { return {ActivationKind::tanh, 0.0}; }
  static Activation relu() { return {ActivationKind::relu, 0.0}; }
  static Activation leaky_relu(double a) { return {ActivationKind::leaky_relu, a}; }
  static Activation sigmoid() { return {ActivationKind::sigmoid, 0.0}; }
  /// "tanh", "relu", "sigmoid", "leaky_relu" or "leaky_relu:0.1".
  static Activation parse(const std::string& text);

  double operator()(double v) const;
  double derivative(double v) const;
  Eigen::RowVectorXd apply(const Eigen::RowVectorXd& h) const;
  Eigen::RowVectorXd apply_derivative(const Eigen::RowVectorXd& h) const;
  bool zero_at_origin() const noexcept { return kind != ActivationKind::sigmoid; }
  std::string name() const;
};

/// Per-node trainable weights, row convention: h = z_prev*T1 + x*T2 + s*T3, u = z*T4.
struct NodeWeights {
  Eigen::MatrixXd theta1;  // p x p
  Eigen::MatrixXd theta2;  // n x p
  Eigen::MatrixXd theta3;  // n x p
  Eigen::MatrixXd theta4;  // p x m

  static NodeWeights zeros(std::size_t n, std::size_t m, std::size_t p);
  /// Entries i.i.d. U(low, high).
  static NodeWeights uniform(std::size_t n, std::size_t m, std::size_t p, double low, double high,
                             Rng& rng);

  std::size_t state_dim() const { return static_cast<std::size_t>(theta2.rows()); }
  std::size_t input_dim() const { return static_cast<std::size_t>(theta4.cols()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(theta1.rows()); }
  /// Throws unless shapes agree with (n, m, p) and every entry is finite.
  void validate() const;

  Eigen::MatrixXd& slot(int k);
  const Eigen::MatrixXd& slot(int k) const;
};

/// Neighbour data a node receives: (j, S_ij, x_j).
struct NeighborRow {
  std::size_t node;
  double shift;
  Eigen::RowVectorXd state;
};

struct LocalOutput {
  Eigen::RowVectorXd h;
  Eigen::RowVectorXd z;
  Eigen::RowVectorXd u;
  Eigen::RowVectorXd aggregate;  // sum_j S_ij x_j
};

/// Local per-node GRNN step. `neighbors` must cover exactly N_i and i itself of
/// `topology`; anything else is a LocalityViolation.
LocalOutput local_forward(std::size_t node, const NodeWeights& weights,
                          const Eigen::RowVectorXd& z_prev, const Eigen::RowVectorXd& x,
                          std::span<const NeighborRow> neighbors, const Activation& activation,
                          const graph::Topology& topology);

struct NetworkOutput {
  Eigen::MatrixXd h;          // N x p
  Eigen::MatrixXd z;          // N x p
  Eigen::MatrixXd u;          // N x m
  Eigen::MatrixXd aggregate;  // S X, N x n
};

/// Centralised form with shared weights: Z = sigma(Z_prev T1 + X T2 + S X T3), U = Z T4.
NetworkOutput centralized_forward(const NodeWeights& shared, const Eigen::MatrixXd& z_prev,
                                  const Eigen::MatrixXd& x, const Eigen::MatrixXd& shift,
                                  const Activation& activation);

/// Matrix form with per-node weights (row i uses weights[i]).
NetworkOutput network_forward(std::span<const NodeWeights> weights, const Eigen::MatrixXd& z_prev,
                              const Eigen::MatrixXd& x,
                              const Eigen::SparseMatrix<double, Eigen::RowMajor>& shift,
                              const Activation& activation);

/// K_k = blockdiag(Theta_ki^T).
struct StackedBlocks {
  Eigen::MatrixXd k1;  // pN x pN
  Eigen::MatrixXd k2;  // pN x nN
  Eigen::MatrixXd k3;  // pN x nN
  Eigen::MatrixXd k4;  // mN x pN
};

StackedBlocks stacked_weight_blocks(std::span<const NodeWeights> weights);
/// K2 + K3 (S kron I_n): the stacked map x -> state part of h.
Eigen::MatrixXd state_feedback_map(const StackedBlocks& blocks, const Eigen::MatrixXd& shift,
                                   std::size_t state_dim);

/// GRNN as a plant::Controller over stacked vectors; keeps Z(t-1) between calls.
class GrnnController final : public plant::Controller {
 public:
  GrnnController(std::vector<NodeWeights> weights, const Eigen::MatrixXd& shift,
                 Activation activation);

  Eigen::VectorXd control(const Eigen::VectorXd& x) override;
  void reset() override;
  const Eigen::MatrixXd& hidden() const noexcept { return z_prev_; }
  const Eigen::MatrixXd& last_preactivation() const noexcept { return h_last_; }

 private:
  std::vector<NodeWeights> weights_;
  Eigen::SparseMatrix<double, Eigen::RowMajor> shift_;
  Activation activation_;
  std::size_t state_dim_;
  Eigen::MatrixXd z_prev_;
  Eigen::MatrixXd h_last_;
};

Eigen::SparseMatrix<double, Eigen::RowMajor> to_sparse(const Eigen::MatrixXd& shift);

/// Row-major full-precision weight document.
nlohmann::json to_json(std::span<const NodeWeights> weights, const Activation& activation);
std::vector<NodeWeights> weights_from_json(const nlohmann::json& doc);
Activation activation_from_json(const nlohmann::json& doc);

}  // namespace netgrnn::grnn
