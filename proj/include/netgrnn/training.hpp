#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include "netgrnn/graph.hpp"
#include "netgrnn/grnn.hpp"
#include "netgrnn/plant.hpp"

namespace netgrnn::training {

/// Per-node quadratic weights and the rollout window.
struct LossConfig {
  std::vector<Eigen::MatrixXd> state_weight;     // P_ti, n x n
  std::vector<Eigen::MatrixXd> input_weight;     // R_ti, m x m
  std::vector<Eigen::MatrixXd> terminal_weight;  // P_Ti, n x n
  std::size_t horizon = 10;                      // Delta T
  std::size_t batch = 100;                       // n_B

  static LossConfig identity(std::size_t nodes, std::size_t n, std::size_t m,
                             std::size_t horizon, std::size_t batch);
  void validate(std::size_t nodes, std::size_t n, std::size_t m) const;
  /// blockdiag of the per-node weights (stacked-cost view).
  Eigen::MatrixXd stacked_state_weight() const;
  Eigen::MatrixXd stacked_input_weight() const;
  Eigen::MatrixXd stacked_terminal_weight() const;
};

/// J_i on one trajectory: sum_{t<T} x_i'P x_i + u_i'R u_i + x_i(T)'P_T x_i(T).
double node_loss(const plant::Trajectory& traj, std::size_t node, const LossConfig& config);
/// Batch average of node_loss.
double node_loss(std::span<const plant::Trajectory> batch, std::size_t node,
                 const LossConfig& config);

/// dJ_i / dTheta_ki, same shapes as NodeWeights.
struct NodeGradients {
  Eigen::MatrixXd g1;
  Eigen::MatrixXd g2;
  Eigen::MatrixXd g3;
  Eigen::MatrixXd g4;

  static NodeGradients zeros_like(const grnn::NodeWeights& w);
  NodeGradients& operator+=(const NodeGradients& other);
  NodeGradients& operator*=(double factor);
  Eigen::MatrixXd& slot(int k);
  const Eigen::MatrixXd& slot(int k) const;
};

/// Rows of one time step at node i.
struct NodeStepData {
  Eigen::RowVectorXd dloss_du;   // 1 x m
  Eigen::RowVectorXd h;          // 1 x p
  Eigen::RowVectorXd z_prev;     // 1 x p
  Eigen::RowVectorXd z;          // 1 x p
  Eigen::RowVectorXd x;          // 1 x n
  Eigen::RowVectorXd aggregate;  // sum_j S_ij x_j, 1 x n
};

/// delta = (dJ/du Theta4^T) .* sigma'(h); g1 = z_prev^T delta, g2 = x^T delta,
/// g3 = s^T delta, g4 = z^T dJ/du.
NodeGradients node_gradients(const NodeStepData& data, const grnn::NodeWeights& weights,
                             const grnn::Activation& activation);

/// How dJ_i/du_i is formed.
enum class GradientMode {
  frozen,       // 2 u_i R_i: plant and Z(t-1) treated as constants
  local_plant,  // adds 2 x_i(t+1)' P_i B_ii, the one-step effect through own input
  bptt,         // exact gradient of the window cost (centralised, experimentation only)
};
enum class WindowMode {
  restart,     // every epoch restarts from fresh x(0) draws
  continuing,  // trajectories carry over between epochs (one long online run)
};

GradientMode parse_gradient_mode(const std::string& text);
WindowMode parse_window_mode(const std::string& text);
std::string to_string(GradientMode mode);
std::string to_string(WindowMode mode);

/// eta_t = eta0 / (1 + t / tau).
struct LearningRateSchedule {
  double initial = 0.01;
  double decay_epochs = 50.0;
  double at(std::size_t epoch) const;
};

NodeGradients mean_gradient(std::span<const NodeGradients> batch);

/// Local gradient step followed by one synchronous consensus round with
/// Metropolis-Hastings weights over the communication graph.
class DsgdOptimizer {
 public:
  DsgdOptimizer(graph::Topology communication, LearningRateSchedule schedule);

  const graph::Topology& communication() const noexcept { return comm_; }
  const graph::ConsensusMatrix& mixing() const noexcept { return mixing_; }
  const LearningRateSchedule& schedule() const noexcept { return schedule_; }

  /// Both phases. `batches[i]` holds node i's per-sample gradients; an empty
  /// or missing batch aborts the whole step.
  std::vector<grnn::NodeWeights> step(std::span<const grnn::NodeWeights> weights,
                                      std::span<const std::vector<NodeGradients>> batches,
                                      std::size_t epoch) const;
  /// Same with already batch-averaged gradients.
  std::vector<grnn::NodeWeights> step_mean(std::span<const grnn::NodeWeights> weights,
                                           std::span<const NodeGradients> mean_gradients,
                                           std::size_t epoch) const;

  grnn::NodeWeights local_step(const grnn::NodeWeights& weights, const NodeGradients& gradient,
                               std::size_t epoch) const;
  /// Mixes node i's row. `neighborhood` lists (j, theta_j) for j in N_i and i.
  grnn::NodeWeights mix(std::size_t node,
                        std::span<const std::pair<std::size_t, const grnn::NodeWeights*>>
                            neighborhood) const;
  std::vector<grnn::NodeWeights> consensus(std::span<const grnn::NodeWeights> weights) const;

 private:
  graph::Topology comm_;
  graph::ConsensusMatrix mixing_;
  LearningRateSchedule schedule_;
};

/// Theta_k = (1/N) sum_i Theta_ki.
grnn::NodeWeights approximate_shared_weights(std::span<const grnn::NodeWeights> weights);

struct TrainConfig {
  std::size_t epochs = 21;
  std::size_t test_samples = 20;
  WindowMode window = WindowMode::continuing;
  GradientMode gradient = GradientMode::frozen;
  double init_mean = 2.0;
  double init_std = 1.0;
  LearningRateSchedule schedule;
  double divergence_threshold = 1e6;
  bool test_noise = true;
  std::size_t threads = 1;
};

/// Everything an epoch needs besides the evolving state. The controller and
/// communication graph default to the symmetrised plant graph.
struct TrainingProblem {
  plant::NetworkedSystem system;
  graph::Topology communication;
  graph::ShiftOperator shift;
  grnn::Activation activation;
  LossConfig loss;
  TrainConfig config;
  std::uint64_t seed = 0;

  Eigen::SparseMatrix<double, Eigen::RowMajor> sparse_shift() const;
  void validate(std::span<const grnn::NodeWeights> weights) const;
};

/// Closed-loop memory of one rollout sample.
struct SampleState {
  Eigen::VectorXd x;  // stacked state
  Eigen::MatrixXd z;  // Z(t-1), N x p
};

struct LossHistory {
  std::vector<std::vector<double>> train;  // [epoch][node]
  std::vector<std::vector<double>> test;   // [epoch][node]
  double mean_train(std::size_t epoch) const;
  double mean_test(std::size_t epoch) const;
};

struct TrainingState {
  std::size_t epoch = 0;
  std::vector<grnn::NodeWeights> weights;
  std::vector<SampleState> train_samples;
  std::vector<SampleState> test_samples;
  LossHistory history;
};

/// Samples drawn for epoch `epoch` (restart) or once (continuing).
std::vector<SampleState> draw_samples(const TrainingProblem& problem, Stream stream,
                                      std::size_t count, std::size_t epoch);
TrainingState initial_state(const TrainingProblem& problem,
                            std::vector<grnn::NodeWeights> weights);

/// One epoch body in matrix form: roll out the batch for Delta T steps, record
/// the train loss, take the D-SGD step, record the test loss.
void run_epoch(const TrainingProblem& problem, TrainingState& state);

struct TrainResult {
  std::vector<grnn::NodeWeights> weights;
  LossHistory history;
};

using EpochCallback =
    std::function<void(std::size_t epoch, std::span<const grnn::NodeWeights> weights)>;

TrainResult train(const TrainingProblem& problem, std::vector<grnn::NodeWeights> initial,
                  const EpochCallback& on_epoch = {});

/// Shared U(low, high) draw copied to every node.
std::vector<grnn::NodeWeights> initial_weights(std::size_t nodes, std::size_t n, std::size_t m,
                                               std::size_t p, double low, double high,
                                               std::uint64_t seed);

/// Gradient of the window cost of one sample for every node (used by the bptt
/// mode; exposed for finite-difference tests). Noise is replayed from `noise`.
std::vector<NodeGradients> window_gradients_bptt(const TrainingProblem& problem,
                                                 std::span<const grnn::NodeWeights> weights,
                                                 const SampleState& start,
                                                 std::span<const Eigen::VectorXd> noise,
                                                 double* total_cost = nullptr);

/// `epoch,node,train_loss,test_loss`.
void write_loss_csv(std::ostream& out, const LossHistory& history);

}  // namespace netgrnn::training
