#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "netgrnn/graph.hpp"
#include "netgrnn/training.hpp"

namespace netgrnn::simnet {

enum class PayloadKind { state_row, weight_block, gradient_ack };

enum class Phase {
  broadcast_states,
  local_forward,
  plant_step,
  compute_gradients,
  local_sgd,
  broadcast_weights,
  consensus_mix,
  test_broadcast_states,
  test_local_forward,
  test_plant_step,
};

std::string to_string(PayloadKind kind);
std::string to_string(Phase phase);

struct NodeEnvelope {
  std::size_t sender = 0;
  std::size_t receiver = 0;
  std::uint64_t round = 0;
  PayloadKind kind = PayloadKind::state_row;
  std::vector<double> payload;

  std::size_t bytes() const { return payload.size() * sizeof(double); }
};

struct LogEntry {
  std::uint64_t round;
  Phase phase;
  std::size_t sender;
  std::size_t receiver;
  PayloadKind kind;
  std::size_t bytes;
  bool operator==(const LogEntry&) const = default;
};

class Network;

/// What node code sees during a phase: its id, its neighbour list and its
/// own mailbox slots. Nothing else of the network is reachable.
class NodeContext {
 public:
  std::size_t id() const noexcept { return id_; }
  Phase phase() const noexcept { return phase_; }
  std::span<const std::size_t> neighbors() const;
  /// Latest envelope from `from`; a non-neighbour is a LocalityViolation.
  const NodeEnvelope& receive(std::size_t from) const;
  bool has_message(std::size_t from) const;
  /// Delivers to every neighbour and to self.
  void broadcast(PayloadKind kind, const std::vector<double>& payload);
  /// Delivers to self only.
  void send_self(PayloadKind kind, std::vector<double> payload);

 private:
  friend class Network;
  NodeContext(Network& net, std::size_t id, Phase phase) : net_(net), id_(id), phase_(phase) {}
  Network& net_;
  std::size_t id_;
  Phase phase_;
};

/// Mailboxes over an undirected communication graph with global barriers
/// between phases. Each slot has a single writer (its sender).
class Network {
 public:
  Network(graph::Topology communication, bool log_messages, std::size_t threads = 1);

  const graph::Topology& communication() const noexcept { return comm_; }
  std::uint64_t round() const noexcept { return round_; }

  /// Runs `node_fn` for every node as one barrier-separated phase.
  void run_phase(Phase phase, const std::function<void(NodeContext&)>& node_fn);
  /// Test hook: delivers an externally built envelope; rejected unless the
  /// sender is in the receiver's neighbourhood.
  void inject(const NodeEnvelope& envelope);
  void clear_mailboxes();

  const std::vector<LogEntry>& log() const noexcept { return log_; }

 private:
  friend class NodeContext;
  std::size_t slot(std::size_t receiver, std::size_t sender) const;  // npos when not local
  void deliver(NodeEnvelope env, Phase phase, std::vector<LogEntry>* sink);

  graph::Topology comm_;
  bool log_messages_;
  std::size_t threads_;
  std::uint64_t round_ = 0;
  std::vector<std::vector<std::size_t>> hood_;  // self first, then neighbours
  std::vector<std::vector<std::optional<NodeEnvelope>>> inbox_;
  std::vector<std::vector<LogEntry>> pending_;  // per-sender log buffers
  std::vector<LogEntry> log_;
};

/// Messages in one broadcast phase: sum_i (|N_i| + 1).
std::size_t messages_per_broadcast(const graph::Topology& communication);

struct HarnessOptions {
  bool log_messages = false;
  std::size_t threads = 1;
};

/// Distributed execution of the training epoch: node code runs per phase and
/// exchanges states and weights only through the network; the plant step is
/// the physical environment.
class Harness {
 public:
  Harness(training::TrainingProblem problem, HarnessOptions options = {});

  /// One epoch; same contract as training::run_epoch.
  void run_round(training::TrainingState& state);
  training::TrainResult train(std::vector<grnn::NodeWeights> initial,
                              const training::EpochCallback& on_epoch = {});

  Network& network() noexcept { return net_; }
  const std::vector<LogEntry>& message_log() const noexcept { return net_.log(); }

 private:
  training::TrainingProblem problem_;
  Network net_;
};

/// `round,phase,sender,receiver,kind,bytes`.
void write_message_log_csv(std::ostream& out, std::span<const LogEntry> log);

}  // namespace netgrnn::simnet
