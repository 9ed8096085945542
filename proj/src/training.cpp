#include "netgrnn/training.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "netgrnn/errors.hpp"
#include "netgrnn/io.hpp"
#include "netgrnn/parallel.hpp"

namespace netgrnn::training {

namespace {
using Eigen::Index;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
Index idx(std::size_t v) { return static_cast<Index>(v); }

RowMatrix as_rows(const Eigen::VectorXd& v, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const RowMatrix>(v.data(), idx(rows), idx(cols));
}

Eigen::VectorXd flatten(const Eigen::MatrixXd& m) {
  RowMatrix r = m;
  return Eigen::Map<const Eigen::VectorXd>(r.data(), r.size());
}

Eigen::MatrixXd blockdiag(const std::vector<Eigen::MatrixXd>& blocks) {
  Index total = 0;
  for (const auto& b : blocks) total += b.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(total, total);
  Index off = 0;
  for (const auto& b : blocks) {
    out.block(off, off, b.rows(), b.cols()) = b;
    off += b.rows();
  }
  return out;
}

// Noise for one step, node i drawn from rngs[i] with a fresh distribution.
Eigen::VectorXd draw_noise(const plant::NetworkedSystem& sys, std::span<Rng> rngs, bool enabled) {
  Eigen::VectorXd w = Eigen::VectorXd::Zero(idx(sys.state_size()));
  if (!enabled || sys.noise_std() <= 0.0) return w;
  const Index n = idx(sys.state_dim());
  for (std::size_t i = 0; i < sys.nodes(); ++i) {
    std::normal_distribution<double> noise(0.0, sys.noise_std());
    for (Index k = 0; k < n; ++k) w(idx(i) * n + k) = noise(rngs[i]);
  }
  return w;
}

double quad(const Eigen::RowVectorXd& v, const Eigen::MatrixXd& w) { return v * w * v.transpose(); }

struct SampleResult {
  std::vector<double> loss;              // per node
  std::vector<NodeGradients> gradients;  // per node, summed over the window
};

// Rolls one sample forward for the window, updating `state` in place.
SampleResult roll_sample(const TrainingProblem& problem, std::span<const grnn::NodeWeights> weights,
                         const Eigen::SparseMatrix<double, Eigen::RowMajor>& shift,
                         SampleState& state, std::vector<Rng>& rngs, bool noise_on,
                         bool want_gradients) {
  const auto& sys = problem.system;
  const auto& loss = problem.loss;
  const std::size_t nodes = sys.nodes();
  const std::size_t n = sys.state_dim();
  const std::size_t m = sys.input_dim();
  const std::size_t horizon = loss.horizon;
  const GradientMode mode = problem.config.gradient;

  SampleResult res;
  res.loss.assign(nodes, 0.0);
  if (want_gradients && mode == GradientMode::bptt) {
    std::vector<Eigen::VectorXd> noise;
    noise.reserve(horizon);
    for (std::size_t t = 0; t < horizon; ++t) noise.push_back(draw_noise(sys, rngs, noise_on));
    // Per-node losses come from a matching forward pass below.
    SampleState start = state;
    res.gradients = window_gradients_bptt(problem, weights, start, noise);
    for (std::size_t t = 0; t < horizon; ++t) {
      const RowMatrix X = as_rows(state.x, nodes, n);
      auto out = grnn::network_forward(weights, state.z, X, shift, problem.activation);
      for (std::size_t i = 0; i < nodes; ++i)
        res.loss[i] += quad(X.row(idx(i)), loss.state_weight[i]) +
                       quad(out.u.row(idx(i)), loss.input_weight[i]);
      state.x = sys.a_sparse() * state.x + sys.b_sparse() * flatten(out.u);
      state.x += noise[t];
      state.z = out.z;
    }
    const RowMatrix X = as_rows(state.x, nodes, n);
    for (std::size_t i = 0; i < nodes; ++i)
      res.loss[i] += quad(X.row(idx(i)), loss.terminal_weight[i]);
    return res;
  }

  if (want_gradients) {
    res.gradients.reserve(nodes);
    for (std::size_t i = 0; i < nodes; ++i)
      res.gradients.push_back(NodeGradients::zeros_like(weights[i]));
  }
  for (std::size_t t = 0; t < horizon; ++t) {
    const RowMatrix X = as_rows(state.x, nodes, n);
    auto out = grnn::network_forward(weights, state.z, X, shift, problem.activation);
    for (std::size_t i = 0; i < nodes; ++i)
      res.loss[i] += quad(X.row(idx(i)), loss.state_weight[i]) +
                     quad(out.u.row(idx(i)), loss.input_weight[i]);
    Eigen::VectorXd next = sys.a_sparse() * state.x + sys.b_sparse() * flatten(out.u);
    next += draw_noise(sys, rngs, noise_on);
    if (want_gradients) {
      const RowMatrix Xn = as_rows(next, nodes, n);
      for (std::size_t i = 0; i < nodes; ++i) {
        const Index ii = idx(i);
        NodeStepData d;
        d.dloss_du = 2.0 * out.u.row(ii) * loss.input_weight[i];
        if (mode == GradientMode::local_plant) {
          const auto& w = (t + 1 < horizon) ? loss.state_weight[i] : loss.terminal_weight[i];
          d.dloss_du += 2.0 * Xn.row(ii) * w *
                        sys.b().block(ii * idx(n), ii * idx(m), idx(n), idx(m));
        }
        d.h = out.h.row(ii);
        d.z_prev = state.z.row(ii);
        d.z = out.z.row(ii);
        d.x = X.row(ii);
        d.aggregate = out.aggregate.row(ii);
        res.gradients[i] += node_gradients(d, weights[i], problem.activation);
      }
    }
    state.x = std::move(next);
    state.z = out.z;
  }
  const RowMatrix X = as_rows(state.x, nodes, n);
  for (std::size_t i = 0; i < nodes; ++i) res.loss[i] += quad(X.row(idx(i)), loss.terminal_weight[i]);
  return res;
}

}  // namespace

LossConfig LossConfig::identity(std::size_t nodes, std::size_t n, std::size_t m,
                                std::size_t horizon, std::size_t batch) {
  LossConfig c;
  c.state_weight.assign(nodes, Eigen::MatrixXd::Identity(idx(n), idx(n)));
  c.input_weight.assign(nodes, Eigen::MatrixXd::Identity(idx(m), idx(m)));
  c.terminal_weight.assign(nodes, Eigen::MatrixXd::Identity(idx(n), idx(n)));
  c.horizon = horizon;
  c.batch = batch;
  return c;
}

void LossConfig::validate(std::size_t nodes, std::size_t n, std::size_t m) const {
  if (state_weight.size() != nodes || input_weight.size() != nodes ||
      terminal_weight.size() != nodes)
    throw InvalidArgument("loss weights must be given for every node");
  if (horizon == 0) throw InvalidArgument("window length must be positive");
  if (batch == 0) throw InvalidArgument("batch size must be positive");
  for (std::size_t i = 0; i < nodes; ++i) {
    if (state_weight[i].rows() != idx(n) || state_weight[i].cols() != idx(n) ||
        terminal_weight[i].rows() != idx(n) || terminal_weight[i].cols() != idx(n) ||
        input_weight[i].rows() != idx(m) || input_weight[i].cols() != idx(m))
      throw InvalidArgument("loss weight shape mismatch at node " + std::to_string(i));
  }
}

Eigen::MatrixXd LossConfig::stacked_state_weight() const { return blockdiag(state_weight); }
Eigen::MatrixXd LossConfig::stacked_input_weight() const { return blockdiag(input_weight); }
Eigen::MatrixXd LossConfig::stacked_terminal_weight() const { return blockdiag(terminal_weight); }

double node_loss(const plant::Trajectory& traj, std::size_t node, const LossConfig& config) {
  if (node >= traj.nodes) throw InvalidArgument("node_loss: node out of range");
  if (traj.horizon() != config.horizon)
    throw InvalidArgument("node_loss: trajectory length differs from the window");
  double j = 0.0;
  for (std::size_t t = 0; t < traj.horizon(); ++t) {
    const Eigen::VectorXd x = traj.node_state(t, node);
    const Eigen::VectorXd u = traj.node_control(t, node);
    j += x.dot(config.state_weight[node] * x) + u.dot(config.input_weight[node] * u);
  }
  const Eigen::VectorXd xT = traj.node_state(traj.horizon(), node);
  return j + xT.dot(config.terminal_weight[node] * xT);
}

double node_loss(std::span<const plant::Trajectory> batch, std::size_t node,
                 const LossConfig& config) {
  if (batch.empty()) throw InvalidArgument("node_loss: empty batch");
  double total = 0.0;
  for (const auto& traj : batch) total += node_loss(traj, node, config);
  return total / static_cast<double>(batch.size());
}

NodeGradients NodeGradients::zeros_like(const grnn::NodeWeights& w) {
  return {Eigen::MatrixXd::Zero(w.theta1.rows(), w.theta1.cols()),
          Eigen::MatrixXd::Zero(w.theta2.rows(), w.theta2.cols()),
          Eigen::MatrixXd::Zero(w.theta3.rows(), w.theta3.cols()),
          Eigen::MatrixXd::Zero(w.theta4.rows(), w.theta4.cols())};
}

NodeGradients& NodeGradients::operator+=(const NodeGradients& other) {
  g1 += other.g1;
  g2 += other.g2;
  g3 += other.g3;
  g4 += other.g4;
  return *this;
}

NodeGradients& NodeGradients::operator*=(double factor) {
  g1 *= factor;
  g2 *= factor;
  g3 *= factor;
  g4 *= factor;
  return *this;
}

Eigen::MatrixXd& NodeGradients::slot(int k) {
  switch (k) {
    case 1: return g1;
    case 2: return g2;
    case 3: return g3;
    case 4: return g4;
  }
  throw InvalidArgument("gradient slot must be 1..4");
}

const Eigen::MatrixXd& NodeGradients::slot(int k) const {
  return const_cast<NodeGradients*>(this)->slot(k);
}

NodeGradients node_gradients(const NodeStepData& d, const grnn::NodeWeights& w,
                             const grnn::Activation& activation) {
  const Eigen::RowVectorXd delta =
      (d.dloss_du * w.theta4.transpose()).cwiseProduct(activation.apply_derivative(d.h));
  return {d.z_prev.transpose() * delta, d.x.transpose() * delta,
          d.aggregate.transpose() * delta, d.z.transpose() * d.dloss_du};
}

GradientMode parse_gradient_mode(const std::string& text) {
  if (text == "frozen") return GradientMode::frozen;
  if (text == "local_plant") return GradientMode::local_plant;
  if (text == "bptt") return GradientMode::bptt;
  throw InvalidArgument("unknown gradient mode: " + text);
}

WindowMode parse_window_mode(const std::string& text) {
  if (text == "restart") return WindowMode::restart;
  if (text == "continuing") return WindowMode::continuing;
  throw InvalidArgument("unknown window mode: " + text);
}

std::string to_string(GradientMode mode) {
  switch (mode) {
    case GradientMode::frozen: return "frozen";
    case GradientMode::local_plant: return "local_plant";
    case GradientMode::bptt: return "bptt";
  }
  return "?";
}

std::string to_string(WindowMode mode) {
  return mode == WindowMode::restart ? "restart" : "continuing";
}

double LearningRateSchedule::at(std::size_t epoch) const {
  return initial / (1.0 + static_cast<double>(epoch) / decay_epochs);
}

NodeGradients mean_gradient(std::span<const NodeGradients> batch) {
  if (batch.empty()) throw InvalidArgument("mean_gradient: empty batch");
  NodeGradients acc = batch[0];
  for (std::size_t b = 1; b < batch.size(); ++b) acc += batch[b];
  acc *= 1.0 / static_cast<double>(batch.size());
  return acc;
}

DsgdOptimizer::DsgdOptimizer(graph::Topology communication, LearningRateSchedule schedule)
    : comm_(std::move(communication)),
      mixing_(graph::metropolis_hastings_weights(comm_)),
      schedule_(schedule) {
  if (!(schedule_.initial > 0.0) || !(schedule_.decay_epochs > 0.0))
    throw InvalidArgument("learning rate and decay must be positive");
}

grnn::NodeWeights DsgdOptimizer::local_step(const grnn::NodeWeights& w, const NodeGradients& g,
                                            std::size_t epoch) const {
  const double eta = schedule_.at(epoch);
  grnn::NodeWeights out = w;
  for (int k = 1; k <= 4; ++k) {
    if (g.slot(k).rows() != w.slot(k).rows() || g.slot(k).cols() != w.slot(k).cols())
      throw InvalidArgument("gradient shape mismatch");
    out.slot(k) -= eta * g.slot(k);
  }
  return out;
}

grnn::NodeWeights DsgdOptimizer::mix(
    std::size_t node,
    std::span<const std::pair<std::size_t, const grnn::NodeWeights*>> neighborhood) const {
  const auto nbrs = comm_.neighbors(node);
  if (neighborhood.size() != nbrs.size() + 1)
    throw LocalityViolation(node, node, "consensus: incomplete neighbourhood");
  std::vector<std::pair<std::size_t, const grnn::NodeWeights*>> sorted(neighborhood.begin(),
                                                                        neighborhood.end());
  std::sort(sorted.begin(), sorted.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    if (!comm_.is_local(node, sorted[k].first))
      throw LocalityViolation(node, sorted[k].first, "consensus");
    if (k > 0 && sorted[k].first == sorted[k - 1].first)
      throw InvalidArgument("consensus: duplicate neighbour weights");
  }
  grnn::NodeWeights out = grnn::NodeWeights::zeros(
      sorted[0].second->state_dim(), sorted[0].second->input_dim(), sorted[0].second->hidden_dim());
  for (const auto& [j, w] : sorted) {
    const double c = mixing_.matrix(idx(node), idx(j));
    for (int k = 1; k <= 4; ++k) out.slot(k) += c * w->slot(k);
  }
  return out;
}

std::vector<grnn::NodeWeights> DsgdOptimizer::consensus(
    std::span<const grnn::NodeWeights> weights) const {
  if (weights.size() != comm_.size()) throw InvalidArgument("consensus: one weight set per node");
  std::vector<grnn::NodeWeights> out;
  out.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    std::vector<std::pair<std::size_t, const grnn::NodeWeights*>> hood;
    hood.emplace_back(i, &weights[i]);
    for (std::size_t j : comm_.neighbors(i)) hood.emplace_back(j, &weights[j]);
    out.push_back(mix(i, hood));
  }
  return out;
}

std::vector<grnn::NodeWeights> DsgdOptimizer::step_mean(
    std::span<const grnn::NodeWeights> weights, std::span<const NodeGradients> mean_gradients,
    std::size_t epoch) const {
  if (weights.size() != comm_.size()) throw InvalidArgument("dsgd: one weight set per node");
  if (mean_gradients.size() != weights.size())
    throw InvalidArgument("dsgd: missing gradient for some node; step aborted");
  std::vector<grnn::NodeWeights> local;
  local.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i)
    local.push_back(local_step(weights[i], mean_gradients[i], epoch));
  return consensus(local);
}

std::vector<grnn::NodeWeights> DsgdOptimizer::step(
    std::span<const grnn::NodeWeights> weights,
    std::span<const std::vector<NodeGradients>> batches, std::size_t epoch) const {
  if (batches.size() != weights.size())
    throw InvalidArgument("dsgd: missing gradient for some node; step aborted");
  std::vector<NodeGradients> means;
  means.reserve(batches.size());
  for (std::size_t i = 0; i < batches.size(); ++i) {
    if (batches[i].empty())
      throw InvalidArgument("dsgd: missing gradient for node " + std::to_string(i) +
                            "; step aborted");
    means.push_back(mean_gradient(batches[i]));
  }
  return step_mean(weights, means, epoch);
}

grnn::NodeWeights approximate_shared_weights(std::span<const grnn::NodeWeights> weights) {
  if (weights.empty()) throw InvalidArgument("approximate_shared_weights: no nodes");
  grnn::NodeWeights acc = weights[0];
  for (std::size_t i = 1; i < weights.size(); ++i)
    for (int k = 1; k <= 4; ++k) acc.slot(k) += weights[i].slot(k);
  for (int k = 1; k <= 4; ++k) acc.slot(k) /= static_cast<double>(weights.size());
  return acc;
}

Eigen::SparseMatrix<double, Eigen::RowMajor> TrainingProblem::sparse_shift() const {
  return grnn::to_sparse(shift.matrix);
}

void TrainingProblem::validate(std::span<const grnn::NodeWeights> weights) const {
  const std::size_t nodes = system.nodes();
  if (communication.size() != nodes) throw InvalidArgument("communication graph size mismatch");
  if (!communication.is_undirected())
    throw InvalidArgument("communication graph must be undirected");
  if (shift.matrix.rows() != idx(nodes) || shift.matrix.cols() != idx(nodes))
    throw InvalidArgument("shift operator size mismatch");
  for (std::size_t i = 0; i < nodes; ++i)
    for (std::size_t j = 0; j < nodes; ++j)
      if (i != j && shift.matrix(idx(i), idx(j)) != 0.0 && !communication.has_edge(j, i))
        throw InvalidArgument("shift operator is not supported on the communication graph");
  loss.validate(nodes, system.state_dim(), system.input_dim());
  if (config.test_samples == 0) throw InvalidArgument("test sample count must be positive");
  if (!(config.init_std >= 0.0)) throw InvalidArgument("initial-state std must be >= 0");
  if (weights.size() != nodes) throw InvalidArgument("need one weight set per node");
  for (const auto& w : weights) {
    w.validate();
    if (w.state_dim() != system.state_dim() || w.input_dim() != system.input_dim() ||
        w.hidden_dim() != weights[0].hidden_dim())
      throw InvalidArgument("weight dimensions disagree with the plant");
  }
}

double LossHistory::mean_train(std::size_t epoch) const {
  const auto& row = train.at(epoch);
  double s = 0.0;
  for (double v : row) s += v;
  return s / static_cast<double>(row.size());
}

double LossHistory::mean_test(std::size_t epoch) const {
  const auto& row = test.at(epoch);
  double s = 0.0;
  for (double v : row) s += v;
  return s / static_cast<double>(row.size());
}

std::vector<SampleState> draw_samples(const TrainingProblem& problem, Stream stream,
                                      std::size_t count, std::size_t epoch) {
  const auto& sys = problem.system;
  std::vector<SampleState> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    auto rngs = plant::node_streams(problem.seed, stream, sys.nodes(), epoch, s);
    SampleState st;
    st.x = plant::sample_initial_state(sys.nodes(), sys.state_dim(), problem.config.init_mean,
                                       problem.config.init_std, rngs);
    out.push_back(std::move(st));
  }
  return out;
}

namespace {
void reset_hidden(std::vector<SampleState>& samples, std::size_t nodes, std::size_t p) {
  for (auto& s : samples) s.z = Eigen::MatrixXd::Zero(idx(nodes), idx(p));
}
}  // namespace

TrainingState initial_state(const TrainingProblem& problem,
                            std::vector<grnn::NodeWeights> weights) {
  problem.validate(weights);
  TrainingState st;
  st.weights = std::move(weights);
  const std::size_t p = st.weights[0].hidden_dim();
  st.train_samples = draw_samples(problem, Stream::train_init, problem.loss.batch, 0);
  st.test_samples = draw_samples(problem, Stream::test_init, problem.config.test_samples, 0);
  reset_hidden(st.train_samples, problem.system.nodes(), p);
  reset_hidden(st.test_samples, problem.system.nodes(), p);
  return st;
}

void run_epoch(const TrainingProblem& problem, TrainingState& state) {
  const auto& sys = problem.system;
  const std::size_t nodes = sys.nodes();
  const std::size_t e = state.epoch;
  const std::size_t p = state.weights[0].hidden_dim();
  const auto shift = problem.sparse_shift();
  const bool noise_on = true;

  if (problem.config.window == WindowMode::restart && e > 0) {
    state.train_samples = draw_samples(problem, Stream::train_init, problem.loss.batch, e);
    state.test_samples = draw_samples(problem, Stream::test_init, problem.config.test_samples, e);
    reset_hidden(state.train_samples, nodes, p);
    reset_hidden(state.test_samples, nodes, p);
  }

  const std::size_t batch = state.train_samples.size();
  std::vector<SampleResult> results(batch);
  parallel_for(batch, problem.config.threads, [&](std::size_t b) {
    auto rngs = plant::node_streams(problem.seed, Stream::train_noise, nodes, e, b);
    results[b] = roll_sample(problem, state.weights, shift, state.train_samples[b], rngs,
                             noise_on, true);
  });

  std::vector<double> train_loss(nodes, 0.0);
  std::vector<NodeGradients> means;
  means.reserve(nodes);
  for (std::size_t i = 0; i < nodes; ++i) {
    NodeGradients acc = results[0].gradients[i];
    train_loss[i] = results[0].loss[i];
    for (std::size_t b = 1; b < batch; ++b) {
      acc += results[b].gradients[i];
      train_loss[i] += results[b].loss[i];
    }
    acc *= 1.0 / static_cast<double>(batch);
    train_loss[i] /= static_cast<double>(batch);
    means.push_back(std::move(acc));
  }
  double mean_loss = 0.0;
  for (double v : train_loss) mean_loss += v;
  mean_loss /= static_cast<double>(nodes);
  if (!std::isfinite(mean_loss) || mean_loss > problem.config.divergence_threshold) {
    std::ostringstream msg;
    msg << "training diverged at epoch " << e << ": mean train loss " << mean_loss
        << " exceeds " << problem.config.divergence_threshold;
    throw NumericalFailure(msg.str());
  }

  DsgdOptimizer opt(problem.communication, problem.config.schedule);
  state.weights = opt.step_mean(state.weights, means, e);

  const std::size_t tests = state.test_samples.size();
  std::vector<SampleResult> test_results(tests);
  parallel_for(tests, problem.config.threads, [&](std::size_t s) {
    auto rngs = plant::node_streams(problem.seed, Stream::test_noise, nodes, e, s);
    test_results[s] = roll_sample(problem, state.weights, shift, state.test_samples[s], rngs,
                                  problem.config.test_noise, false);
  });
  std::vector<double> test_loss(nodes, 0.0);
  for (std::size_t i = 0; i < nodes; ++i) {
    for (std::size_t s = 0; s < tests; ++s) test_loss[i] += test_results[s].loss[i];
    test_loss[i] /= static_cast<double>(tests);
  }

  state.history.train.push_back(std::move(train_loss));
  state.history.test.push_back(std::move(test_loss));
  ++state.epoch;
}

TrainResult train(const TrainingProblem& problem, std::vector<grnn::NodeWeights> initial,
                  const EpochCallback& on_epoch) {
  TrainingState st = initial_state(problem, std::move(initial));
  for (std::size_t e = 0; e < problem.config.epochs; ++e) {
    run_epoch(problem, st);
    if (on_epoch) on_epoch(e, st.weights);
  }
  return {std::move(st.weights), std::move(st.history)};
}

std::vector<grnn::NodeWeights> initial_weights(std::size_t nodes, std::size_t n, std::size_t m,
                                               std::size_t p, double low, double high,
                                               std::uint64_t seed) {
  if (nodes == 0 || n == 0 || m == 0 || p == 0)
    throw InvalidArgument("initial_weights: dimensions must be positive");
  if (!(low <= high)) throw InvalidArgument("initial_weights: need low <= high");
  Rng rng = make_rng(seed, Stream::weights);
  const grnn::NodeWeights shared = grnn::NodeWeights::uniform(n, m, p, low, high, rng);
  return std::vector<grnn::NodeWeights>(nodes, shared);
}

std::vector<NodeGradients> window_gradients_bptt(const TrainingProblem& problem,
                                                 std::span<const grnn::NodeWeights> weights,
                                                 const SampleState& start,
                                                 std::span<const Eigen::VectorXd> noise,
                                                 double* total_cost) {
  const auto& sys = problem.system;
  const auto& loss = problem.loss;
  const std::size_t nodes = sys.nodes();
  const std::size_t n = sys.state_dim();
  const std::size_t horizon = noise.size();
  const auto shift = problem.sparse_shift();
  const Eigen::MatrixXd P = loss.stacked_state_weight();
  const Eigen::MatrixXd R = loss.stacked_input_weight();
  const Eigen::MatrixXd PT = loss.stacked_terminal_weight();

  std::vector<Eigen::VectorXd> xs{start.x};
  std::vector<Eigen::MatrixXd> zprev{start.z};
  std::vector<grnn::NetworkOutput> outs;
  std::vector<Eigen::VectorXd> us;
  double cost = 0.0;
  for (std::size_t t = 0; t < horizon; ++t) {
    const RowMatrix X = as_rows(xs.back(), nodes, n);
    outs.push_back(grnn::network_forward(weights, zprev.back(), X, shift, problem.activation));
    us.push_back(flatten(outs.back().u));
    cost += xs.back().dot(P * xs.back()) + us.back().dot(R * us.back());
    Eigen::VectorXd next = sys.a_sparse() * xs.back() + sys.b_sparse() * us.back();
    next += noise[t];
    xs.push_back(std::move(next));
    zprev.push_back(outs.back().z);
  }
  cost += xs.back().dot(PT * xs.back());
  if (total_cost) *total_cost = cost;

  std::vector<NodeGradients> grads;
  for (std::size_t i = 0; i < nodes; ++i) grads.push_back(NodeGradients::zeros_like(weights[i]));

  const Eigen::MatrixXd St = Eigen::MatrixXd(shift).transpose();
  Eigen::VectorXd lambda = 2.0 * PT * xs.back();  // dL/dx(t+1)
  Eigen::MatrixXd gz_carry = Eigen::MatrixXd::Zero(start.z.rows(), start.z.cols());
  for (std::size_t tt = horizon; tt-- > 0;) {
    const auto& out = outs[tt];
    const RowMatrix X = as_rows(xs[tt], nodes, n);
    const Eigen::VectorXd gu_vec = 2.0 * R * us[tt] + sys.b().transpose() * lambda;
    const RowMatrix GU = as_rows(gu_vec, nodes, sys.input_dim());
    Eigen::VectorXd gx_vec = 2.0 * P * xs[tt] + sys.a().transpose() * lambda;
    Eigen::MatrixXd GX = as_rows(gx_vec, nodes, n);
    Eigen::MatrixXd G3(idx(nodes), idx(n));
    Eigen::MatrixXd next_carry(gz_carry.rows(), gz_carry.cols());
    for (std::size_t i = 0; i < nodes; ++i) {
      const Index ii = idx(i);
      const auto& w = weights[i];
      const Eigen::RowVectorXd gu = GU.row(ii);
      const Eigen::RowVectorXd gz = gu * w.theta4.transpose() + gz_carry.row(ii);
      const Eigen::RowVectorXd gh =
          gz.cwiseProduct(problem.activation.apply_derivative(out.h.row(ii)));
      grads[i].g4 += out.z.row(ii).transpose() * gu;
      grads[i].g1 += zprev[tt].row(ii).transpose() * gh;
      grads[i].g2 += X.row(ii).transpose() * gh;
      grads[i].g3 += out.aggregate.row(ii).transpose() * gh;
      GX.row(ii) += gh * w.theta2.transpose();
      G3.row(ii) = gh * w.theta3.transpose();
      next_carry.row(ii) = gh * w.theta1.transpose();
    }
    GX += St * G3;
    gz_carry = next_carry;
    lambda = flatten(GX);
  }
  return grads;
}

void write_loss_csv(std::ostream& out, const LossHistory& history) {
  out << "epoch,node,train_loss,test_loss\n";
  for (std::size_t e = 0; e < history.train.size(); ++e)
    for (std::size_t i = 0; i < history.train[e].size(); ++i)
      out << e << ',' << i << ',' << io::format_double(history.train[e][i]) << ','
          << io::format_double(history.test[e][i]) << '\n';
}

}  // namespace netgrnn::training
