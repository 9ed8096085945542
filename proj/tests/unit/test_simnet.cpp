#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "helpers.hpp"
#include "netgrnn/errors.hpp"
#include "netgrnn/simnet.hpp"

using namespace netgrnn;
using graph::Topology;
using simnet::Harness;
using simnet::Network;
using simnet::NodeContext;
using simnet::PayloadKind;
using simnet::Phase;

namespace {

double history_diff(const training::LossHistory& a, const training::LossHistory& b) {
  double d = 0.0;
  if (a.train.size() != b.train.size()) return 1e300;
  for (std::size_t e = 0; e < a.train.size(); ++e)
    for (std::size_t i = 0; i < a.train[e].size(); ++i) {
      d = std::max(d, std::abs(a.train[e][i] - b.train[e][i]));
      d = std::max(d, std::abs(a.test[e][i] - b.test[e][i]));
    }
  return d;
}

double result_diff(const training::TrainResult& a, const training::TrainResult& b) {
  double d = history_diff(a.history, b.history);
  for (std::size_t i = 0; i < a.weights.size(); ++i)
    d = std::max(d, testutil::weights_diff(a.weights[i], b.weights[i]));
  return d;
}

}  // namespace

TEST(Network, PathBroadcastCountsSevenMessages) {
  Network net(Topology::path(3), true);
  net.run_phase(Phase::broadcast_states,
                [](NodeContext& ctx) { ctx.broadcast(PayloadKind::state_row, {1.0, 2.0}); });
  EXPECT_EQ(net.log().size(), 7u);
  EXPECT_EQ(simnet::messages_per_broadcast(Topology::path(3)), 7u);
  std::size_t self = 0;
  for (const auto& e : net.log()) {
    self += e.sender == e.receiver;
    EXPECT_TRUE(net.communication().is_local(e.receiver, e.sender));
    EXPECT_EQ(e.bytes, 16u);
  }
  EXPECT_EQ(self, 3u);
}

TEST(Network, NoEdgesMeansSelfDeliveryOnly) {
  Network net(Topology::empty(4), true);
  net.run_phase(Phase::broadcast_states,
                [](NodeContext& ctx) { ctx.broadcast(PayloadKind::state_row, {0.0}); });
  ASSERT_EQ(net.log().size(), 4u);
  for (const auto& e : net.log()) EXPECT_EQ(e.sender, e.receiver);
}

TEST(Network, ReceivesAcrossBarrier) {
  Network net(Topology::path(3), false, 2);
  net.run_phase(Phase::broadcast_states, [](NodeContext& ctx) {
    ctx.broadcast(PayloadKind::state_row, {static_cast<double>(ctx.id())});
  });
  std::vector<double> seen(3, 0.0);
  net.run_phase(Phase::local_forward, [&](NodeContext& ctx) {
    double s = ctx.receive(ctx.id()).payload[0];
    for (std::size_t j : ctx.neighbors()) s += ctx.receive(j).payload[0];
    seen[ctx.id()] = s;
  });
  EXPECT_EQ(seen, (std::vector<double>{1.0, 3.0, 3.0}));
}

TEST(Network, NonNeighbourReadIsLocalityViolation) {
  Network net(Topology::path(3), false);
  net.run_phase(Phase::broadcast_states,
                [](NodeContext& ctx) { ctx.broadcast(PayloadKind::state_row, {1.0}); });
  try {
    net.run_phase(Phase::local_forward, [](NodeContext& ctx) {
      if (ctx.id() == 0) ctx.receive(2);
    });
    FAIL() << "expected a locality violation";
  } catch (const LocalityViolation& e) {
    EXPECT_EQ(e.reader(), 0u);
    EXPECT_EQ(e.target(), 2u);
    EXPECT_EQ(e.phase(), "local_forward");
  }
  EXPECT_THROW(net.run_phase(Phase::local_forward,
                             [](NodeContext& ctx) {
                               if (ctx.id() == 2) ctx.has_message(0);
                             }),
               LocalityViolation);
}

TEST(Network, InjectFromNonNeighbourIsRejected) {
  Network net(Topology::path(4), true);
  simnet::NodeEnvelope env{3, 0, 0, PayloadKind::state_row, {9.0}};
  EXPECT_THROW(net.inject(env), LocalityViolation);
  simnet::NodeEnvelope ok{1, 0, 0, PayloadKind::state_row, {9.0}};
  EXPECT_NO_THROW(net.inject(ok));
  EXPECT_THROW(net.inject(ok), InvalidArgument);  // same round tag twice
}

TEST(Network, MissingMessage) {
  Network net(Topology::path(2), false);
  EXPECT_THROW(net.run_phase(Phase::local_forward, [](NodeContext& ctx) { ctx.receive(ctx.id()); }),
               InvalidArgument);
  EXPECT_THROW(Network(Topology(2, {{0, 1}}), false), InvalidArgument);
}

TEST(Network, BroadcastCountGrowsLinearlyAtFixedDegree) {
  std::vector<std::size_t> counts;
  for (std::size_t n : {10u, 20u, 40u}) {
    auto ring = Topology::ring(n);
    counts.push_back(simnet::messages_per_broadcast(ring));
    EXPECT_EQ(counts.back(), 3 * n);
    auto g = graph::generate_random_partition_graph(n, n / 5, 0.8, 0.02, 3);
    std::size_t deg_sum = 0;
    for (std::size_t i = 0; i < n; ++i) deg_sum += g.degree(i);
    EXPECT_EQ(simnet::messages_per_broadcast(g), n + deg_sum);
    EXPECT_LE(simnet::messages_per_broadcast(g), (g.max_degree() + 1) * n);
  }
  EXPECT_EQ(counts[1] - counts[0], 30u);
  EXPECT_EQ(counts[2] - counts[1], 60u);
}

TEST(Harness, PathOfThreeMatchesMonolithic) {
  auto prob = testutil::small_problem(Topology::path(3), 2, 1, 2, 21);
  auto w0 = training::initial_weights(3, 2, 1, 2, 0.0, 1.0, 21);
  auto mono = training::train(prob, w0);
  Harness h(prob);
  auto dist = h.train(w0);
  EXPECT_LT(result_diff(mono, dist), 1e-12);
}

TEST(Harness, RandomConfigurationsMatchMonolithic) {
  std::mt19937_64 gen(77);
  std::uniform_int_distribution<int> nodes(1, 8), dim(1, 2);
  for (int trial = 0; trial < 12; ++trial) {
    const auto n_nodes = static_cast<std::size_t>(nodes(gen));
    const auto n = static_cast<std::size_t>(dim(gen)), m = static_cast<std::size_t>(dim(gen)),
               p = static_cast<std::size_t>(dim(gen));
    auto topo = testutil::random_connected(n_nodes, 0.3, gen);
    auto prob = testutil::small_problem(topo, n, m, p, 1000 + trial);
    prob.config.window = trial % 2 ? training::WindowMode::restart : training::WindowMode::continuing;
    prob.config.gradient =
        trial % 3 == 0 ? training::GradientMode::local_plant : training::GradientMode::frozen;
    prob.config.test_noise = trial % 4 != 1;
    prob.activation = trial % 5 == 0 ? grnn::Activation::leaky_relu(0.1) : grnn::Activation::tanh();
    auto w0 = training::initial_weights(n_nodes, n, m, p, 0.0, 0.3, 7 + trial);
    auto mono = training::train(prob, w0);
    Harness h(prob, {false, 1 + static_cast<std::size_t>(trial % 3)});
    auto dist = h.train(w0);
    EXPECT_LT(result_diff(mono, dist), 1e-12) << "trial " << trial;
  }
}

TEST(Harness, SingleNodeIsStandaloneSgd) {
  auto prob = testutil::small_problem(Topology::empty(1), 2, 2, 2, 4);
  auto w0 = training::initial_weights(1, 2, 2, 2, 0.0, 1.0, 4);
  Harness h(prob, {true, 1});
  auto dist = h.train(w0);
  auto mono = training::train(prob, w0);
  EXPECT_LT(result_diff(mono, dist), 1e-12);
  for (const auto& e : h.message_log()) EXPECT_EQ(e.sender, e.receiver);
}

TEST(Harness, RejectsBptt) {
  auto prob = testutil::small_problem(Topology::path(2), 1, 1, 1, 4);
  prob.config.gradient = training::GradientMode::bptt;
  EXPECT_THROW(Harness(prob, {}), InvalidArgument);
}

TEST(Harness, MessageLogIsDeterministicAndCountable) {
  auto topo = Topology::path(4);
  auto prob = testutil::small_problem(topo, 2, 1, 2, 9);
  auto w0 = training::initial_weights(4, 2, 1, 2, 0.0, 1.0, 9);
  Harness a(prob, {true, 1});
  Harness b(prob, {true, 3});
  a.train(w0);
  b.train(w0);
  EXPECT_EQ(a.message_log(), b.message_log());
  const std::size_t per_bcast = simnet::messages_per_broadcast(topo);
  std::size_t state_msgs = 0, weight_msgs = 0, acks = 0;
  for (const auto& e : a.message_log()) {
    EXPECT_TRUE(topo.is_local(e.receiver, e.sender));
    if (e.kind == PayloadKind::state_row) ++state_msgs;
    if (e.kind == PayloadKind::weight_block) ++weight_msgs;
    if (e.kind == PayloadKind::gradient_ack) ++acks;
  }
  const std::size_t epochs = prob.config.epochs;
  EXPECT_EQ(state_msgs, epochs * 2 * prob.loss.horizon * per_bcast);
  EXPECT_EQ(weight_msgs, epochs * per_bcast);
  EXPECT_EQ(acks, epochs * 4);
  for (std::size_t k = 1; k < a.message_log().size(); ++k)
    EXPECT_LE(a.message_log()[k - 1].round, a.message_log()[k].round);
}

TEST(Harness, LogCsvSchema) {
  std::vector<simnet::LogEntry> log{{3, Phase::broadcast_weights, 1, 0, PayloadKind::weight_block, 64}};
  std::ostringstream out;
  simnet::write_message_log_csv(out, log);
  EXPECT_EQ(out.str(), "round,phase,sender,receiver,kind,bytes\n3,broadcast_weights,1,0,weight_block,64\n");
}
