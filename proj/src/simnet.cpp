#include "netgrnn/simnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <sstream>

#include "netgrnn/errors.hpp"
#include "netgrnn/parallel.hpp"

namespace netgrnn::simnet {

namespace {
using Eigen::Index;
Index idx(std::size_t v) { return static_cast<Index>(v); }
constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

bool is_send_phase(Phase p) {
  return p == Phase::broadcast_states || p == Phase::test_broadcast_states ||
         p == Phase::broadcast_weights || p == Phase::compute_gradients;
}
}  // namespace

std::string to_string(PayloadKind kind) {
  switch (kind) {
    case PayloadKind::state_row: return "state_row";
    case PayloadKind::weight_block: return "weight_block";
    case PayloadKind::gradient_ack: return "gradient_ack";
  }
  return "?";
}

std::string to_string(Phase phase) {
  switch (phase) {
    case Phase::broadcast_states: return "broadcast_states";
    case Phase::local_forward: return "local_forward";
    case Phase::plant_step: return "plant_step";
    case Phase::compute_gradients: return "compute_gradients";
    case Phase::local_sgd: return "local_sgd";
    case Phase::broadcast_weights: return "broadcast_weights";
    case Phase::consensus_mix: return "consensus_mix";
    case Phase::test_broadcast_states: return "test_broadcast_states";
    case Phase::test_local_forward: return "test_local_forward";
    case Phase::test_plant_step: return "test_plant_step";
  }
  return "?";
}

std::span<const std::size_t> NodeContext::neighbors() const {
  return net_.comm_.neighbors(id_);
}

bool NodeContext::has_message(std::size_t from) const {
  const std::size_t s = net_.slot(id_, from);
  if (s == npos) throw LocalityViolation(id_, from, to_string(phase_));
  return net_.inbox_[id_][s].has_value();
}

const NodeEnvelope& NodeContext::receive(std::size_t from) const {
  const std::size_t s = net_.slot(id_, from);
  if (s == npos) throw LocalityViolation(id_, from, to_string(phase_));
  const auto& env = net_.inbox_[id_][s];
  if (!env)
    throw InvalidArgument("node " + std::to_string(id_) + " has no message from node " +
                          std::to_string(from) + " during " + to_string(phase_));
  return *env;
}

void NodeContext::broadcast(PayloadKind kind, const std::vector<double>& payload) {
  for (std::size_t j : net_.hood_[id_]) {
    NodeEnvelope env{id_, j, net_.round_, kind, payload};
    net_.deliver(std::move(env), phase_, &net_.pending_[id_]);
  }
}

void NodeContext::send_self(PayloadKind kind, std::vector<double> payload) {
  NodeEnvelope env{id_, id_, net_.round_, kind, std::move(payload)};
  net_.deliver(std::move(env), phase_, &net_.pending_[id_]);
}

Network::Network(graph::Topology communication, bool log_messages, std::size_t threads)
    : comm_(std::move(communication)), log_messages_(log_messages), threads_(threads) {
  if (!comm_.is_undirected()) throw InvalidArgument("communication graph must be undirected");
  const std::size_t nodes = comm_.size();
  hood_.resize(nodes);
  inbox_.resize(nodes);
  pending_.resize(nodes);
  for (std::size_t i = 0; i < nodes; ++i) {
    hood_[i].push_back(i);
    for (std::size_t j : comm_.neighbors(i)) hood_[i].push_back(j);
    inbox_[i].resize(hood_[i].size());
  }
}

std::size_t Network::slot(std::size_t receiver, std::size_t sender) const {
  if (receiver >= hood_.size()) return npos;
  const auto& h = hood_[receiver];
  for (std::size_t k = 0; k < h.size(); ++k)
    if (h[k] == sender) return k;
  return npos;
}

void Network::deliver(NodeEnvelope env, Phase phase, std::vector<LogEntry>* sink) {
  const std::size_t s = slot(env.receiver, env.sender);
  if (s == npos) throw LocalityViolation(env.receiver, env.sender, to_string(phase));
  auto& box = inbox_[env.receiver][s];
  if (box && box->round >= env.round)
    throw InvalidArgument("mailbox round tags must strictly increase");
  if (log_messages_ && sink)
    sink->push_back({env.round, phase, env.sender, env.receiver, env.kind, env.bytes()});
  box = std::move(env);
}

void Network::clear_mailboxes() {
  for (auto& slots : inbox_)
    for (auto& s : slots) s.reset();
}

void Network::run_phase(Phase phase, const std::function<void(NodeContext&)>& node_fn) {
  ++round_;
  if (is_send_phase(phase)) clear_mailboxes();
  parallel_for(comm_.size(), threads_, [&](std::size_t i) {
    NodeContext ctx(*this, i, phase);
    node_fn(ctx);
  });
  for (auto& buf : pending_) {
    log_.insert(log_.end(), buf.begin(), buf.end());
    buf.clear();
  }
}

void Network::inject(const NodeEnvelope& envelope) {
  NodeEnvelope env = envelope;
  env.round = round_;
  std::vector<LogEntry> sink;
  deliver(std::move(env), Phase::broadcast_states, &sink);
  log_.insert(log_.end(), sink.begin(), sink.end());
}

std::size_t messages_per_broadcast(const graph::Topology& communication) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < communication.size(); ++i) total += communication.degree(i) + 1;
  return total;
}

namespace {

// Node-private memory. Only node i's lambda touches mem[i].
struct NodeMemory {
  grnn::NodeWeights w;
  grnn::NodeWeights local;  // after the local SGD step
  std::vector<Eigen::RowVectorXd> x;  // measured own state per sample
  std::vector<Eigen::RowVectorXd> z;  // z_i(t-1) per sample
  std::vector<Eigen::RowVectorXd> u;  // latest control per sample
  std::vector<double> loss;
  std::vector<std::vector<training::NodeStepData>> steps;
  training::NodeGradients grad;
  double mean_loss = 0.0;
};

std::vector<double> flatten(const grnn::NodeWeights& w) {
  std::vector<double> out;
  for (int k = 1; k <= 4; ++k) {
    const auto& m = w.slot(k);
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  }
  return out;
}

grnn::NodeWeights unflatten(const std::vector<double>& v, const grnn::NodeWeights& like) {
  grnn::NodeWeights w = like;
  std::size_t pos = 0;
  for (int k = 1; k <= 4; ++k) {
    auto& m = w.slot(k);
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) {
        if (pos >= v.size()) throw InvalidArgument("weight payload too short");
        m(r, c) = v[pos++];
      }
  }
  if (pos != v.size()) throw InvalidArgument("weight payload too long");
  return w;
}

double quad(const Eigen::RowVectorXd& v, const Eigen::MatrixXd& w) { return v * w * v.transpose(); }

}  // namespace

Harness::Harness(training::TrainingProblem problem, HarnessOptions options)
    : problem_(std::move(problem)),
      net_(problem_.communication, options.log_messages, options.threads) {
  if (problem_.config.gradient == training::GradientMode::bptt)
    throw InvalidArgument("the message-passing harness has no bptt mode (it needs global data)");
}

void Harness::run_round(training::TrainingState& state) {
  const auto& sys = problem_.system;
  const auto& lossc = problem_.loss;
  const std::size_t nodes = sys.nodes();
  const std::size_t n = sys.state_dim();
  const std::size_t m = sys.input_dim();
  const std::size_t e = state.epoch;
  const std::size_t horizon = lossc.horizon;
  const std::size_t p = state.weights.at(0).hidden_dim();
  const auto& S = problem_.shift.matrix;
  const bool local_plant = problem_.config.gradient == training::GradientMode::local_plant;
  problem_.validate(state.weights);

  if (problem_.config.window == training::WindowMode::restart && e > 0) {
    state.train_samples =
        training::draw_samples(problem_, Stream::train_init, lossc.batch, e);
    state.test_samples =
        training::draw_samples(problem_, Stream::test_init, problem_.config.test_samples, e);
    for (auto* set : {&state.train_samples, &state.test_samples})
      for (auto& s : *set) s.z = Eigen::MatrixXd::Zero(idx(nodes), idx(p));
  }

  std::vector<NodeMemory> mem(nodes);
  for (std::size_t i = 0; i < nodes; ++i) mem[i].w = state.weights[i];

  // Loads samples into node memory (each node measures its own rows).
  auto load = [&](const std::vector<training::SampleState>& samples) {
    for (std::size_t i = 0; i < nodes; ++i) {
      auto& mi = mem[i];
      mi.x.clear();
      mi.z.clear();
      mi.u.assign(samples.size(), Eigen::RowVectorXd());
      mi.loss.assign(samples.size(), 0.0);
      mi.steps.assign(samples.size(), {});
      for (const auto& s : samples) {
        mi.x.push_back(s.x.segment(idx(i * n), idx(n)).transpose());
        mi.z.push_back(s.z.row(idx(i)));
      }
    }
  };

  auto rollout = [&](std::vector<training::SampleState>& samples, Stream noise_stream,
                     bool training_pass, bool noise_on) {
    const std::size_t count = samples.size();
    load(samples);
    std::vector<std::vector<Rng>> rngs;
    rngs.reserve(count);
    for (std::size_t s = 0; s < count; ++s)
      rngs.push_back(plant::node_streams(problem_.seed, noise_stream, nodes, e, s));
    const Phase bcast = training_pass ? Phase::broadcast_states : Phase::test_broadcast_states;
    const Phase fwd = training_pass ? Phase::local_forward : Phase::test_local_forward;
    const Phase plant_phase = training_pass ? Phase::plant_step : Phase::test_plant_step;

    for (std::size_t t = 0; t < horizon; ++t) {
      net_.run_phase(bcast, [&](NodeContext& ctx) {
        const auto& mi = mem[ctx.id()];
        std::vector<double> payload;
        payload.reserve(count * n);
        for (const auto& row : mi.x) payload.insert(payload.end(), row.data(), row.data() + n);
        ctx.broadcast(PayloadKind::state_row, payload);
      });

      net_.run_phase(fwd, [&](NodeContext& ctx) {
        const std::size_t i = ctx.id();
        auto& mi = mem[i];
        std::vector<const NodeEnvelope*> envs{&ctx.receive(i)};
        for (std::size_t j : ctx.neighbors()) envs.push_back(&ctx.receive(j));
        std::vector<grnn::NeighborRow> rows(envs.size());
        for (std::size_t s = 0; s < count; ++s) {
          for (std::size_t k = 0; k < envs.size(); ++k) {
            const std::size_t j = envs[k]->sender;
            rows[k].node = j;
            rows[k].shift = S(idx(i), idx(j));
            rows[k].state =
                Eigen::Map<const Eigen::RowVectorXd>(envs[k]->payload.data() + s * n, idx(n));
          }
          grnn::LocalOutput out = grnn::local_forward(i, mi.w, mi.z[s], mi.x[s], rows,
                                                      problem_.activation, net_.communication());
          mi.loss[s] += quad(mi.x[s], lossc.state_weight[i]) + quad(out.u, lossc.input_weight[i]);
          if (training_pass) {
            training::NodeStepData d;
            d.dloss_du = 2.0 * out.u * lossc.input_weight[i];
            d.h = out.h;
            d.z_prev = mi.z[s];
            d.z = out.z;
            d.x = mi.x[s];
            d.aggregate = out.aggregate;
            mi.steps[s].push_back(std::move(d));
          }
          mi.z[s] = out.z;
          mi.u[s] = out.u;
        }
      });

      // Physical plant: actuators apply u, the coupled dynamics evolve, sensors
      // report each node's own next state.
      for (std::size_t s = 0; s < count; ++s) {
        Eigen::VectorXd u(idx(nodes * m));
        for (std::size_t i = 0; i < nodes; ++i) u.segment(idx(i * m), idx(m)) = mem[i].u[s].transpose();
        Eigen::VectorXd next = sys.a_sparse() * samples[s].x + sys.b_sparse() * u;
        if (noise_on && sys.noise_std() > 0.0) {
          for (std::size_t i = 0; i < nodes; ++i) {
            std::normal_distribution<double> noise(0.0, sys.noise_std());
            for (std::size_t k = 0; k < n; ++k) next(idx(i * n + k)) += noise(rngs[s][i]);
          }
        }
        samples[s].x = std::move(next);
      }
      const bool last = t + 1 == horizon;
      net_.run_phase(plant_phase, [&](NodeContext& ctx) {
        const std::size_t i = ctx.id();
        auto& mi = mem[i];
        for (std::size_t s = 0; s < count; ++s) {
          mi.x[s] = samples[s].x.segment(idx(i * n), idx(n)).transpose();
          if (training_pass && local_plant) {
            const auto& w = last ? lossc.terminal_weight[i] : lossc.state_weight[i];
            mi.steps[s].back().dloss_du +=
                2.0 * mi.x[s] * w * sys.b().block(idx(i * n), idx(i * m), idx(n), idx(m));
          }
          if (last) mi.loss[s] += quad(mi.x[s], lossc.terminal_weight[i]);
        }
      });
    }
    for (std::size_t s = 0; s < count; ++s)
      for (std::size_t i = 0; i < nodes; ++i) samples[s].z.row(idx(i)) = mem[i].z[s];
  };

  rollout(state.train_samples, Stream::train_noise, true, true);
  const double batch = static_cast<double>(state.train_samples.size());

  net_.run_phase(Phase::compute_gradients, [&](NodeContext& ctx) {
    const std::size_t i = ctx.id();
    auto& mi = mem[i];
    std::vector<training::NodeGradients> per_sample;
    per_sample.reserve(mi.steps.size());
    for (const auto& steps : mi.steps) {
      training::NodeGradients g = training::NodeGradients::zeros_like(mi.w);
      for (const auto& d : steps) g += training::node_gradients(d, mi.w, problem_.activation);
      per_sample.push_back(std::move(g));
    }
    mi.grad = per_sample.at(0);
    mi.mean_loss = mi.loss.at(0);
    for (std::size_t s = 1; s < per_sample.size(); ++s) {
      mi.grad += per_sample[s];
      mi.mean_loss += mi.loss[s];
    }
    mi.grad *= 1.0 / batch;
    mi.mean_loss /= batch;
    ctx.send_self(PayloadKind::gradient_ack, {});
  });

  std::vector<double> train_loss(nodes);
  double mean_loss = 0.0;
  for (std::size_t i = 0; i < nodes; ++i) {
    train_loss[i] = mem[i].mean_loss;
    mean_loss += train_loss[i];
  }
  mean_loss /= static_cast<double>(nodes);
  if (!std::isfinite(mean_loss) || mean_loss > problem_.config.divergence_threshold) {
    std::ostringstream msg;
    msg << "training diverged at epoch " << e << ": mean train loss " << mean_loss
        << " exceeds " << problem_.config.divergence_threshold;
    throw NumericalFailure(msg.str());
  }

  const training::DsgdOptimizer opt(problem_.communication, problem_.config.schedule);
  net_.run_phase(Phase::local_sgd, [&](NodeContext& ctx) {
    const std::size_t i = ctx.id();
    if (!ctx.has_message(i))
      throw InvalidArgument("missing gradient at node " + std::to_string(i) + "; step aborted");
    mem[i].local = opt.local_step(mem[i].w, mem[i].grad, e);
  });
  net_.run_phase(Phase::broadcast_weights, [&](NodeContext& ctx) {
    ctx.broadcast(PayloadKind::weight_block, flatten(mem[ctx.id()].local));
  });
  net_.run_phase(Phase::consensus_mix, [&](NodeContext& ctx) {
    const std::size_t i = ctx.id();
    std::vector<grnn::NodeWeights> received;
    std::vector<std::size_t> senders{i};
    for (std::size_t j : ctx.neighbors()) senders.push_back(j);
    received.reserve(senders.size());
    for (std::size_t j : senders) received.push_back(unflatten(ctx.receive(j).payload, mem[i].w));
    std::vector<std::pair<std::size_t, const grnn::NodeWeights*>> hood;
    for (std::size_t k = 0; k < senders.size(); ++k) hood.emplace_back(senders[k], &received[k]);
    mem[i].w = opt.mix(i, hood);
  });

  rollout(state.test_samples, Stream::test_noise, false, problem_.config.test_noise);
  const double tests = static_cast<double>(state.test_samples.size());
  std::vector<double> test_loss(nodes, 0.0);
  for (std::size_t i = 0; i < nodes; ++i) {
    for (double v : mem[i].loss) test_loss[i] += v;
    test_loss[i] /= tests;
    state.weights[i] = mem[i].w;
  }
  state.history.train.push_back(std::move(train_loss));
  state.history.test.push_back(std::move(test_loss));
  ++state.epoch;
}

training::TrainResult Harness::train(std::vector<grnn::NodeWeights> initial,
                                     const training::EpochCallback& on_epoch) {
  training::TrainingState st = training::initial_state(problem_, std::move(initial));
  for (std::size_t e = 0; e < problem_.config.epochs; ++e) {
    run_round(st);
    if (on_epoch) on_epoch(e, st.weights);
  }
  return {std::move(st.weights), std::move(st.history)};
}

void write_message_log_csv(std::ostream& out, std::span<const LogEntry> log) {
  out << "round,phase,sender,receiver,kind,bytes\n";
  for (const auto& e : log)
    out << e.round << ',' << to_string(e.phase) << ',' << e.sender << ',' << e.receiver << ','
        << to_string(e.kind) << ',' << e.bytes << '\n';
}

}  // namespace netgrnn::simnet
