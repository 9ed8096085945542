#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "helpers.hpp"
#include "netgrnn/errors.hpp"
#include "netgrnn/plant.hpp"

using namespace netgrnn;
using graph::Topology;
using plant::NetworkedSystem;

namespace {

NetworkedSystem scalar_system(double a, double b, double noise = 0.0) {
  return NetworkedSystem(Topology::empty(1), 1, 1, Eigen::MatrixXd::Constant(1, 1, a),
                         Eigen::MatrixXd::Constant(1, 1, b), noise);
}

double spectral_norm(const Eigen::MatrixXd& m) {
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

}  // namespace

TEST(GenerateSystem, ScalarNormalization) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto sys = plant::generate_system(Topology::empty(1), 1, 1, 0.995, 0.0, seed);
    EXPECT_NEAR(std::abs(sys.a()(0, 0)), 0.995, 1e-15);
    EXPECT_NEAR(std::abs(sys.b()(0, 0)), 1.0, 1e-15);
  }
}

TEST(GenerateSystem, DisconnectedIsBlockDiagonal) {
  auto sys = plant::generate_system(Topology::empty(2), 2, 1, 0.995, 0.0, 4);
  EXPECT_TRUE(sys.a_block(0, 1).isZero(0.0));
  EXPECT_TRUE(sys.a_block(1, 0).isZero(0.0));
  EXPECT_TRUE(sys.b_block(0, 1).isZero(0.0));
  EXPECT_TRUE(sys.b_block(1, 0).isZero(0.0));
  EXPECT_FALSE(sys.a_block(0, 0).isZero(0.0));
}

TEST(GenerateSystem, TenNodeSystemIsControllable) {
  auto topo = graph::generate_random_partition_graph(10, 3, 0.8, 0.1, 3);
  auto sys = plant::generate_system(topo, 2, 2, 0.995, 0.1, 3);
  // Independent oracle: SVD rank of the controllability matrix built here.
  Eigen::MatrixXd ctrb(20, 20 * 20);
  Eigen::MatrixXd blk = sys.b();
  for (int k = 0; k < 20; ++k) {
    ctrb.middleCols(k * 20, 20) = blk;
    blk = sys.a() * blk;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(ctrb);
  const auto& s = svd.singularValues();
  int rank = 0;
  for (int k = 0; k < s.size(); ++k) rank += s(k) > 1e-9 * s(0);
  EXPECT_EQ(rank, 20);
  EXPECT_EQ(plant::controllability_rank(sys), 20u);
  EXPECT_NEAR(spectral_norm(sys.a()), 0.995, 1e-12);
  EXPECT_NEAR(spectral_norm(sys.b()), 1.0, 1e-12);
}

TEST(GenerateSystem, SparsityMatchesTopology) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    auto topo = testutil::random_connected(6, 0.2, rng);
    auto sys = plant::generate_system(topo, 2, 1, 0.995, 0.0, 100 + trial);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_EQ(sys.a_block(i, j).isZero(0.0), !topo.is_local(i, j));
        EXPECT_EQ(sys.b_block(i, j).isZero(0.0), !topo.is_local(i, j));
      }
  }
}

TEST(GenerateSystem, DeterministicAndValidated) {
  auto topo = Topology::path(3);
  auto a = plant::generate_system(topo, 2, 2, 0.9, 0.1, 12);
  auto b = plant::generate_system(topo, 2, 2, 0.9, 0.1, 12);
  EXPECT_EQ(a.a(), b.a());
  EXPECT_EQ(a.b(), b.b());
  EXPECT_THROW(plant::generate_system(topo, 0, 1, 0.9, 0.1, 1), InvalidArgument);
  EXPECT_THROW(plant::generate_system(topo, 1, 1, 0.0, 0.1, 1), InvalidArgument);
}

TEST(Step, Examples) {
  auto sys = scalar_system(0.5, 1.0);
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(1);
  EXPECT_EQ(plant::step(sys, zero, zero, std::span<Rng>{})(0), 0.0);
  Eigen::VectorXd x = Eigen::VectorXd::Constant(1, 2.0);
  Eigen::VectorXd u = Eigen::VectorXd::Constant(1, 1.0);
  EXPECT_DOUBLE_EQ(plant::step(sys, x, u, std::span<Rng>{})(0), 2.0);
  EXPECT_THROW(plant::step(sys, Eigen::VectorXd::Zero(2), u, std::span<Rng>{}), InvalidArgument);
}

TEST(Step, NoiseIsZeroMean) {
  auto topo = Topology::path(2);
  auto sys = plant::generate_system(topo, 2, 1, 0.9, 0.1, 5);
  Eigen::VectorXd x(4), u(2);
  x << 1.0, -2.0, 0.5, 3.0;
  u << 0.25, -1.0;
  const Eigen::VectorXd exact = sys.a() * x + sys.b() * u;
  auto rngs = plant::node_streams(77, Stream::misc, 2);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(4);
  const int draws = 100000;
  for (int k = 0; k < draws; ++k) sum += plant::step(sys, x, u, rngs) - exact;
  sum /= draws;
  EXPECT_LT(sum.cwiseAbs().maxCoeff(), 3.0 * 0.1 / std::sqrt(double(draws)));
}

TEST(Step, NodeStepMatchesStackedStep) {
  std::mt19937_64 gen(2);
  auto topo = Topology(4, {{0, 1}, {1, 0}, {2, 1}, {3, 2}, {2, 3}});
  auto sys = plant::generate_system(topo, 2, 3, 0.9, 0.1, 8);
  Eigen::VectorXd x = testutil::random_matrix(8, 1, gen);
  Eigen::VectorXd u = testutil::random_matrix(12, 1, gen);
  auto stacked_rngs = plant::node_streams(5, Stream::misc, 4);
  auto node_rngs = plant::node_streams(5, Stream::misc, 4);
  Eigen::VectorXd stacked = plant::step(sys, x, u, stacked_rngs);
  for (std::size_t i = 0; i < 4; ++i) {
    Eigen::VectorXd local = plant::node_step(sys, i, x, u, &node_rngs[i]);
    EXPECT_LT((local - stacked.segment(static_cast<Eigen::Index>(2 * i), 2)).cwiseAbs().maxCoeff(),
              1e-12);
  }
}

TEST(ControllabilityRank, Examples) {
  EXPECT_EQ(plant::controllability_rank(Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Zero(2, 1)),
            0u);
  Eigen::MatrixXd a(2, 2), b(2, 1);
  a << 0, 1, 0, 0;
  b << 0, 1;
  EXPECT_EQ(plant::controllability_rank(a, b), 2u);
  EXPECT_EQ(plant::controllability_rank_pbh(a, b), 2u);
  EXPECT_EQ(plant::controllability_rank_svd(a, b), 2u);
}

TEST(ControllabilityRank, PbhDetectsUncontrollableMode) {
  Eigen::MatrixXd a = Eigen::Vector3d(0.5, 0.2, -0.3).asDiagonal();
  Eigen::MatrixXd b(3, 1);
  b << 1, 1, 0;
  EXPECT_EQ(plant::controllability_rank_svd(a, b), 2u);
  EXPECT_EQ(plant::controllability_rank_pbh(a, b), 2u);
}

TEST(Lqr, ScalarRiccatiRoot) {
  Eigen::MatrixXd one = Eigen::MatrixXd::Identity(1, 1);
  auto sol = plant::solve_lqr(0.5 * one, one, one, one, one);
  // Oracle: positive root of p^2 - 0.25 p - 1 = 0 and K = a b p / (r + b^2 p).
  const double p = (0.25 + std::sqrt(0.0625 + 4.0)) / 2.0;
  EXPECT_NEAR(p, 1.13278, 1e-5);
  EXPECT_NEAR(sol.p(0, 0), p, 1e-9);
  EXPECT_NEAR(sol.k(0, 0), 0.5 * p / (1.0 + p), 1e-9);
}

TEST(Lqr, ZeroDynamics) {
  Eigen::MatrixXd q = Eigen::Vector2d(2.0, 3.0).asDiagonal();
  auto sol = plant::solve_lqr(Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Identity(2, 2), q,
                              Eigen::MatrixXd::Identity(2, 2), Eigen::MatrixXd::Identity(2, 2));
  EXPECT_LT(testutil::max_abs_diff(sol.p, q), 1e-12);
  EXPECT_LT(sol.k.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Lqr, TenNodeClosedLoopIsStable) {
  auto topo = graph::generate_random_partition_graph(10, 3, 0.8, 0.1, 1);
  auto sys = plant::generate_system(topo, 2, 2, 0.995, 0.1, 1);
  Eigen::MatrixXd i20 = Eigen::MatrixXd::Identity(20, 20);
  auto sol = plant::solve_lqr(sys, i20, i20, i20);
  Eigen::EigenSolver<Eigen::MatrixXd> es(sys.a() - sys.b() * sol.k, false);
  EXPECT_LT(es.eigenvalues().cwiseAbs().maxCoeff(), 1.0);
  EXPECT_LT(plant::riccati_residual(sys.a(), sys.b(), i20, i20, sol.p), 1e-8);
  EXPECT_LT(testutil::max_abs_diff(sol.p, sol.p.transpose()), 1e-10);
  EXPECT_GT(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(sol.p).eigenvalues().minCoeff(), 0.0);
}

TEST(Lqr, RiccatiCostMatchesRollout) {
  auto sys = plant::generate_system(Topology::path(2), 2, 1, 0.995, 0.0, 21);
  Eigen::MatrixXd q = Eigen::MatrixXd::Identity(4, 4);
  Eigen::MatrixXd r = Eigen::MatrixXd::Identity(2, 2);
  auto sol = plant::solve_lqr(sys, q, r, q);
  Eigen::Vector4d x0(1.0, -0.5, 2.0, 0.3);
  plant::LinearFeedback ctrl(sol.k);
  auto traj = plant::rollout(sys, ctrl, x0, 500);
  // Infinite-horizon cost truncated at T = 500 (terminal term negligible).
  double cost = 0.0;
  for (std::size_t t = 0; t < 500; ++t)
    cost += traj.states[t].squaredNorm() + traj.controls[t].squaredNorm();
  const double riccati = x0.dot(sol.p * x0);
  EXPECT_LT(std::abs(cost - riccati) / riccati, 1e-6);
}

TEST(Lqr, RejectsIndefiniteInputWeight) {
  Eigen::MatrixXd one = Eigen::MatrixXd::Identity(1, 1);
  EXPECT_THROW(plant::solve_lqr(0.5 * one, one, one, -one, one), InvalidArgument);
}

TEST(Rollout, ZeroControllerFromOrigin) {
  auto sys = plant::generate_system(Topology::path(3), 2, 1, 0.9, 0.0, 2);
  plant::ZeroController zero(3);
  auto traj = plant::rollout(sys, zero, Eigen::VectorXd::Zero(6), 10);
  ASSERT_EQ(traj.states.size(), 11u);
  ASSERT_EQ(traj.controls.size(), 10u);
  for (const auto& s : traj.states) EXPECT_TRUE(s.isZero(0.0));
}

TEST(Rollout, LqrDecays) {
  Eigen::MatrixXd one = Eigen::MatrixXd::Identity(1, 1);
  auto sys = scalar_system(1.2, 1.0);
  auto sol = plant::solve_lqr(sys, one, one, one);
  plant::LinearFeedback ctrl(sol.k);
  auto traj = plant::rollout(sys, ctrl, Eigen::VectorXd::Constant(1, 3.0), 100);
  EXPECT_LT(traj.states.back().norm(), 1e-6 * 3.0);
}

TEST(Rollout, StackedAndPerNodeAgree) {
  std::mt19937_64 gen(4);
  auto topo = Topology(3, {{0, 1}, {1, 2}, {2, 0}});
  auto sys = plant::generate_system(topo, 2, 2, 0.95, 0.0, 6);
  std::vector<Eigen::VectorXd> us;
  for (int t = 0; t < 30; ++t) us.push_back(testutil::random_matrix(6, 1, gen));
  Eigen::VectorXd x = testutil::random_matrix(6, 1, gen);
  Eigen::VectorXd y = x;
  for (const auto& u : us) {
    Eigen::VectorXd next(6);
    for (std::size_t i = 0; i < 3; ++i)
      next.segment(static_cast<Eigen::Index>(2 * i), 2) = plant::node_step(sys, i, y, u, nullptr);
    y = next;
    x = plant::step(sys, x, u, std::span<Rng>{});
  }
  EXPECT_LT((x - y).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Trajectory, ViewsAndCsv) {
  auto sys = plant::generate_system(Topology::path(2), 2, 1, 0.9, 0.0, 2);
  plant::ZeroController zero(2);
  Eigen::Vector4d x0(1, 2, 3, 4);
  auto traj = plant::rollout(sys, zero, x0, 2);
  EXPECT_EQ(traj.node_state(0, 1)(0), 3.0);
  EXPECT_EQ(traj.state_matrix(0)(1, 1), 4.0);
  std::ostringstream out;
  plant::write_trajectory_csv(out, traj);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "t,node,x0,x1,u0");
}

TEST(SystemJson, RoundTrip) {
  auto topo = Topology::path(3);
  auto sys = plant::generate_system(topo, 2, 1, 0.9, 0.1, 3);
  auto back = plant::system_from_json(plant::to_json(sys), topo);
  EXPECT_EQ(back.a(), sys.a());
  EXPECT_EQ(back.b(), sys.b());
  EXPECT_EQ(back.noise_std(), sys.noise_std());
}

TEST(SystemJson, RejectsOffPatternBlocks) {
  auto topo = Topology::path(3);
  auto sys = plant::generate_system(topo, 1, 1, 0.9, 0.1, 3);
  auto doc = plant::to_json(sys);
  doc["A"][2] = 1.0;  // A_02 on a path graph
  EXPECT_THROW(plant::system_from_json(doc, topo), InvalidArgument);
}
