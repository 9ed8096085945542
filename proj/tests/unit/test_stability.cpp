#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "netgrnn/errors.hpp"
#include "netgrnn/stability.hpp"

using namespace netgrnn;
using namespace netgrnn::stability;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using grnn::Activation;
using grnn::NodeWeights;

namespace {

VectorXd vec1(double v) { return VectorXd::Constant(1, v); }

Box interval(double lo, double hi) { return {vec1(lo), vec1(hi)}; }

MatrixXd stable_matrix(Eigen::Index n, double radius, std::mt19937_64& gen) {
  MatrixXd a = testutil::random_matrix(n, n, gen);
  return a * (radius / graph::spectral_radius(a));
}

// Zero-controller augmented system for plant (A, B) with p hidden units per node.
AugmentedSystem zero_controller(const MatrixXd& a, const MatrixXd& b, int nodes, int n, int m,
                                int p) {
  std::vector<NodeWeights> ws(static_cast<std::size_t>(nodes),
                              NodeWeights::zeros(static_cast<std::size_t>(n),
                                                 static_cast<std::size_t>(m),
                                                 static_cast<std::size_t>(p)));
  auto blocks = grnn::stacked_weight_blocks(ws);
  auto bounds = activation_bounds(Activation::tanh(),
                                  Box::symmetric(static_cast<std::size_t>(nodes * p), 1.0));
  return build_augmented(a, b, blocks, MatrixXd::Zero(nodes, nodes), static_cast<std::size_t>(n),
                         bounds);
}

MatrixXd lyapunov_seeded_p(const AugmentedSystem& aug, const MatrixXd& a, double eps) {
  const Eigen::Index nx = a.rows();
  const Eigen::Index nxi = static_cast<Eigen::Index>(aug.layout.size());
  MatrixXd p = MatrixXd::Identity(nxi, nxi);
  p.topLeftCorner(nx, nx) = dlyap(a, (eps + 1e-3) * MatrixXd::Identity(nx, nx));
  return p;
}

}  // namespace

TEST(Box, Basics) {
  Box b = Box::symmetric(2, 1.5);
  EXPECT_TRUE(b.contains(VectorXd::Constant(2, 1.5)));
  EXPECT_FALSE(b.contains(VectorXd::Constant(2, 1.6)));
  EXPECT_TRUE(b.contains_zero());
  EXPECT_FALSE(interval(0.5, 1.0).contains_zero());
  EXPECT_THROW((Box{vec1(1.0), vec1(0.0)}.validate()), InvalidArgument);
  EXPECT_THROW(Box::symmetric(2, -1.0), InvalidArgument);
}

TEST(IntervalArithmetic, ProductIsExactForBoxes) {
  std::mt19937_64 gen(1);
  MatrixXd m = testutil::random_matrix(3, 4, gen);
  Box box{testutil::random_matrix(4, 1, gen, -2, -0.1), testutil::random_matrix(4, 1, gen, 0.1, 2)};
  Box out = interval_product(m, box);
  // Vertex enumeration oracle.
  VectorXd lo = VectorXd::Constant(3, 1e300), hi = VectorXd::Constant(3, -1e300);
  for (int mask = 0; mask < 16; ++mask) {
    VectorXd v(4);
    for (int k = 0; k < 4; ++k) v(k) = (mask >> k) & 1 ? box.upper(k) : box.lower(k);
    VectorXd y = m * v;
    lo = lo.cwiseMin(y);
    hi = hi.cwiseMax(y);
  }
  EXPECT_LT((lo - out.lower).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((hi - out.upper).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ActivationBounds, TanhUnitBox) {
  auto b = activation_bounds(Activation::tanh(), interval(-1.0, 1.0));
  EXPECT_NEAR(b.sector_lower(0), 0.76159, 1e-5);
  EXPECT_DOUBLE_EQ(b.sector_upper(0), 1.0);
  EXPECT_NEAR(b.slope_lower(0), 0.41997, 1e-5);
  EXPECT_DOUBLE_EQ(b.slope_lower(0), 1.0 - std::tanh(1.0) * std::tanh(1.0));
  EXPECT_DOUBLE_EQ(b.slope_upper(0), 1.0);
}

TEST(ActivationBounds, LeakyRelu) {
  for (double r : {0.1, 3.0, 100.0}) {
    auto b = activation_bounds(Activation::leaky_relu(0.1), interval(-r, 2 * r));
    EXPECT_DOUBLE_EQ(b.sector_lower(0), 0.1);
    EXPECT_DOUBLE_EQ(b.slope_lower(0), 0.1);
    EXPECT_DOUBLE_EQ(b.sector_upper(0), 1.0);
    EXPECT_DOUBLE_EQ(b.slope_upper(0), 1.0);
  }
}

TEST(ActivationBounds, TinyTanhBoxIsNearlyLinear) {
  auto b = activation_bounds(Activation::tanh(), interval(-1e-6, 1e-6));
  EXPECT_LT(1.0 - b.sector_lower(0), 1e-12);
  EXPECT_LT(1.0 - b.slope_lower(0), 1e-11);
}

TEST(ActivationBounds, Rejections) {
  EXPECT_THROW(activation_bounds(Activation::tanh(), interval(0.5, 1.0)), InvalidArgument);
  EXPECT_THROW(activation_bounds(Activation::sigmoid(), interval(-1.0, 1.0)), InvalidArgument);
}

TEST(ActivationBounds, SampledSectorAndSlopeConditions) {
  std::mt19937_64 gen(8);
  std::uniform_real_distribution<double> ends(0.05, 6.0);
  for (int trial = 0; trial < 40; ++trial) {
    Activation act = trial % 2 ? Activation::tanh() : Activation::leaky_relu(0.05 * (trial % 7));
    Box box = interval(-ends(gen), ends(gen));
    auto b = activation_bounds(act, box);
    std::vector<double> grid;
    for (int k = 0; k < 100; ++k)
      grid.push_back(box.lower(0) + (box.upper(0) - box.lower(0)) * k / 99.0);
    for (double v : grid) {
      const double s = act(v);
      EXPECT_LE((s - b.sector_lower(0) * v) * (s - b.sector_upper(0) * v), 1e-15);
      EXPECT_LE((s - b.slope_lower(0) * v) * (s - b.slope_upper(0) * v), 1e-15);
      for (double w : grid) {
        if (w == v) continue;
        const double slope = (act(w) - s) / (w - v);
        EXPECT_GE(slope, b.slope_lower(0) - 1e-9);
        EXPECT_LE(slope, b.slope_upper(0) + 1e-9);
      }
    }
  }
}

TEST(InputBox, Examples) {
  Box x = interval(-1.0, 1.0);
  Box z = interval(-1.0, 1.0);
  auto h0 = input_box(MatrixXd::Zero(1, 1), MatrixXd::Zero(1, 1), x, z);
  EXPECT_EQ(h0.lower(0), 0.0);
  EXPECT_EQ(h0.upper(0), 0.0);
  auto h2 = input_box(MatrixXd::Zero(1, 1), MatrixXd::Constant(1, 1, 2.0), x, z);
  EXPECT_DOUBLE_EQ(h2.lower(0), -2.0);
  EXPECT_DOUBLE_EQ(h2.upper(0), 2.0);
  auto h3 = input_box(MatrixXd::Constant(1, 1, 0.5), MatrixXd::Constant(1, 1, 1.0), x,
                      activation_range(Activation::tanh(), 1));
  EXPECT_DOUBLE_EQ(h3.lower(0), -1.5);
  EXPECT_DOUBLE_EQ(h3.upper(0), 1.5);
}

TEST(InputBox, InvariantBoxIsMonotoneAndSound) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 20; ++trial) {
    MatrixXd k1 = testutil::random_matrix(3, 3, gen, -0.3, 0.3);
    MatrixXd f = testutil::random_matrix(3, 4, gen);
    auto small = invariant_input_box(k1, f, Box::symmetric(4, 1.0), Activation::tanh());
    auto large = invariant_input_box(k1, f, Box::symmetric(4, 2.0), Activation::tanh());
    EXPECT_TRUE(large.h.contains(small.h, 1e-12));
    EXPECT_TRUE(small.h.contains_zero());
    // Closed-loop h stays inside the box for states inside the x box.
    VectorXd z = VectorXd::Zero(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int t = 0; t < 200; ++t) {
      VectorXd x(4);
      for (int k = 0; k < 4; ++k) x(k) = u(gen);
      VectorXd h = k1 * z + f * x;
      EXPECT_TRUE(small.h.contains(h, 1e-12));
      z = h.unaryExpr([](double v) { return std::tanh(v); });
    }
  }
}

TEST(InputBox, UnboundedActivation) {
  auto ok = invariant_input_box(MatrixXd::Constant(1, 1, 0.5), MatrixXd::Constant(1, 1, 1.0),
                                interval(-1, 1), Activation::leaky_relu(0.1));
  EXPECT_NEAR(ok.h.upper(0), 2.0, 1e-9);  // fixed point of h = 0.5 h + 1
  EXPECT_THROW(invariant_input_box(MatrixXd::Constant(1, 1, 1.5), MatrixXd::Constant(1, 1, 1.0),
                                   interval(-1, 1), Activation::leaky_relu(0.1)),
               NumericalFailure);
}

TEST(Iqc, ZeroMultipliersGiveZeroForm) {
  auto b = activation_bounds(Activation::tanh(), Box::symmetric(3, 2.0));
  auto iqc = build_iqc(b, IqcMultipliers::uniform(3, 0, 0, 0, 0));
  EXPECT_TRUE(iqc.q.isZero(0.0));
  EXPECT_EQ(iqc.q.rows(), 18);
  EXPECT_EQ(iqc.c.rows(), 18);
  EXPECT_EQ(iqc.c.cols(), 6);
}

TEST(Iqc, SectorTermByHand) {
  SectorSlopeBounds b{interval(-1, 1), vec1(0.5), vec1(1.0), vec1(0.5), vec1(1.0)};
  auto iqc = build_iqc(b, IqcMultipliers::uniform(1, 1.0, 0, 0, 0));
  const double z = std::tanh(1.0);
  VectorXd q = iqc.output(VectorXd::Zero(2), vec1(1.0), vec1(z));
  const double form = q.dot(iqc.q * q);
  EXPECT_NEAR(form, 2.0 * (1.0 - z) * (z - 0.5), 1e-15);
  EXPECT_NEAR(form, 0.124731, 1e-6);
  EXPECT_GE(form, 0.0);
}

TEST(Iqc, FullFormMatchesHandExpansion) {
  std::mt19937_64 gen(2);
  auto b = activation_bounds(Activation::tanh(), Box::symmetric(2, 1.5));
  IqcMultipliers mult{testutil::random_matrix(2, 1, gen, 0, 1), VectorXd(2),
                      testutil::random_matrix(2, 1, gen, 0, 1),
                      testutil::random_matrix(2, 1, gen, 0, 1)};
  mult.eta0 = mult.eta_lower + mult.eta_upper + VectorXd::Constant(2, 0.3);
  auto iqc = build_iqc(b, mult);
  EXPECT_LT(testutil::max_abs_diff(iqc.q, iqc.q.transpose()), 0.0 + 1e-300);
  VectorXd h_prev = testutil::random_matrix(2, 1, gen), z_prev = h_prev.array().tanh();
  VectorXd h = testutil::random_matrix(2, 1, gen), z = h.array().tanh();
  VectorXd psi = iqc.next_state(h_prev, z_prev);
  VectorXd q = iqc.output(psi, h, z);
  double expect = 0.0;
  for (int k = 0; k < 2; ++k) {
    const double s1 = b.sector_upper(k) * h(k) - z(k), s2 = z(k) - b.sector_lower(k) * h(k);
    const double l1 = b.slope_upper(k) * h(k) - z(k), l2 = z(k) - b.slope_lower(k) * h(k);
    const double p1 = z_prev(k) - b.slope_upper(k) * h_prev(k);
    const double p2 = b.slope_lower(k) * h_prev(k) - z_prev(k);
    expect += 2 * mult.mu(k) * s1 * s2 + 2 * mult.eta0(k) * l1 * l2 +
              2 * mult.eta_upper(k) * l1 * p2 + 2 * mult.eta_lower(k) * l2 * p1;
  }
  EXPECT_NEAR(q.dot(iqc.q * q), expect, 1e-13);
}

TEST(Iqc, MultiplierValidation) {
  auto b = activation_bounds(Activation::tanh(), Box::symmetric(2, 1.0));
  EXPECT_THROW(build_iqc(b, IqcMultipliers::uniform(2, -1, 0, 0, 0)), InvalidArgument);
  EXPECT_THROW(build_iqc(b, IqcMultipliers::uniform(2, 1, 0.5, 0.3, 0.3)), InvalidArgument);
  EXPECT_THROW(build_iqc(b, IqcMultipliers::uniform(3, 1, 1, 0, 0)), InvalidArgument);
}

TEST(Iqc, RunningSumIsNonnegative) {
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 1e300;
  for (int draw = 0; draw < 200; ++draw) {
    const int r = 1 + draw % 3;
    Box box{-testutil::random_matrix(r, 1, gen, 0.1, 3.0), testutil::random_matrix(r, 1, gen, 0.1, 3.0)};
    auto b = activation_bounds(Activation::tanh(), box);
    IqcMultipliers mult{testutil::random_matrix(r, 1, gen, 0, 2), VectorXd(r),
                        testutil::random_matrix(r, 1, gen, 0, 2),
                        testutil::random_matrix(r, 1, gen, 0, 2)};
    mult.eta0 = mult.eta_lower + mult.eta_upper + testutil::random_matrix(r, 1, gen, 0, 1);
    auto iqc = build_iqc(b, mult);
    VectorXd psi = VectorXd::Zero(2 * r);
    double sum = 0.0;
    for (int t = 0; t < 40; ++t) {
      VectorXd h(r);
      for (int k = 0; k < r; ++k) h(k) = box.lower(k) + unit(gen) * (box.upper(k) - box.lower(k));
      VectorXd z = h.array().tanh();
      VectorXd q = iqc.output(psi, h, z);
      sum += q.dot(iqc.q * q);
      worst = std::min(worst, sum);
      psi = iqc.next_state(h, z);
    }
  }
  EXPECT_GE(worst, -1e-10);
}

TEST(Augmented, ScalarBlocksByHand) {
  const double a = 0.8, b = 0.5, t1 = 0.3, t2 = -0.2, t3 = 0.4, t4 = 1.5, s = 0.6;
  NodeWeights w = NodeWeights::zeros(1, 1, 1);
  w.theta1(0, 0) = t1;
  w.theta2(0, 0) = t2;
  w.theta3(0, 0) = t3;
  w.theta4(0, 0) = t4;
  SectorSlopeBounds bd{interval(-2, 2), vec1(0.45), vec1(1.0), vec1(0.07), vec1(1.0)};
  auto aug = build_augmented(MatrixXd::Constant(1, 1, a), MatrixXd::Constant(1, 1, b),
                             grnn::stacked_weight_blocks(std::vector<NodeWeights>{w}),
                             MatrixXd::Constant(1, 1, s), 1, bd);
  const double f = t2 + t3 * s;
  MatrixXd ea(3, 3);
  ea << a, 0, 0, f, 0, t1, 0, 0, 0;
  MatrixXd eb(3, 2);
  eb << 0, b * t4, 0, 0, 0, 1;
  MatrixXd ec = MatrixXd::Zero(6, 3);
  ec(4, 1) = -1.0;
  ec(4, 2) = 1.0;
  ec(5, 1) = 0.07;
  ec(5, 2) = -1.0;
  MatrixXd ed(6, 2);
  ed << 1.0, -1.0, -0.45, 1.0, 1.0, -1.0, -0.07, 1.0, 0, 0, 0, 0;
  MatrixXd eh(1, 3);
  eh << f, 0, t1;
  EXPECT_LT(testutil::max_abs_diff(aug.a, ea), 1e-15);
  EXPECT_LT(testutil::max_abs_diff(aug.b, eb), 1e-15);
  EXPECT_LT(testutil::max_abs_diff(aug.c, ec), 1e-15);
  EXPECT_LT(testutil::max_abs_diff(aug.d, ed), 1e-15);
  EXPECT_LT(testutil::max_abs_diff(aug.h_map, eh), 1e-15);
  EXPECT_EQ(aug.layout.h_offset, 1u);
  EXPECT_EQ(aug.layout.z_offset, 2u);
}

TEST(Augmented, ZeroWeightsGiveOpenLoop) {
  std::mt19937_64 gen(5);
  MatrixXd a = testutil::random_matrix(4, 4, gen), b = testutil::random_matrix(4, 2, gen);
  auto aug = zero_controller(a, b, 2, 2, 1, 2);
  EXPECT_EQ(aug.a.topLeftCorner(4, 4), a);
  EXPECT_TRUE(aug.a.topRightCorner(4, 8).isZero(0.0));
  EXPECT_TRUE(aug.b.topRows(4).isZero(0.0));
}

TEST(Augmented, TrajectoryMatchesDirectClosedLoop) {
  std::mt19937_64 gen(6);
  auto topo = graph::Topology::path(3);
  auto sys = plant::generate_system(topo, 2, 1, 0.95, 0.0, 2);
  std::vector<NodeWeights> ws;
  for (int i = 0; i < 3; ++i) ws.push_back(testutil::random_weights(2, 1, 2, gen, 0.5));
  auto s = graph::shift_operator(topo, graph::ShiftKind::normalized_adjacency).matrix;
  auto bounds = activation_bounds(Activation::tanh(), Box::symmetric(6, 5.0));
  auto aug = build_augmented(sys, ws, s, bounds);
  VectorXd x0 = testutil::random_matrix(6, 1, gen);
  auto sim = simulate_augmented(aug, Activation::tanh(), x0, 100);
  grnn::GrnnController ctrl(ws, s, Activation::tanh());
  auto traj = plant::rollout(sys, ctrl, x0, 100);
  for (std::size_t t = 0; t <= 100; ++t)
    EXPECT_LT((sim.xi[t].head(6) - traj.states[t]).cwiseAbs().maxCoeff(), 1e-10) << t;
}

TEST(Dlyap, SolvesLyapunovEquation) {
  std::mt19937_64 gen(7);
  MatrixXd a = stable_matrix(5, 0.9, gen);
  MatrixXd w = MatrixXd::Identity(5, 5);
  MatrixXd p = dlyap(a, w);
  EXPECT_LT((a.transpose() * p * a - p + w).cwiseAbs().maxCoeff(), 1e-9 * p.norm());
  EXPECT_THROW(dlyap(stable_matrix(3, 1.2, gen), MatrixXd::Identity(3, 3)), NumericalFailure);
}

TEST(Certificate, ZeroControllerLyapunovSeed) {
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < 10; ++trial) {
    MatrixXd a = stable_matrix(4, 0.5 + 0.045 * trial, gen);
    auto aug = zero_controller(a, testutil::random_matrix(4, 2, gen), 2, 2, 1, 2);
    MatrixXd p = lyapunov_seeded_p(aug, a, 1e-4);
    auto cert = check_certificate(aug, IqcMultipliers::uniform(4, 1.0, 0, 0, 0), p, 1e-4);
    EXPECT_TRUE(cert.certified()) << cert.max_eig;
    EXPECT_GT(cert.p_min_eig, cert.tolerance);
    // Zero multipliers leave the free hidden-state direction unconstrained.
    auto bare = check_certificate(aug, IqcMultipliers::uniform(4, 0, 0, 0, 0), p, 1e-4);
    EXPECT_FALSE(bare.certified());
  }
}

TEST(Certificate, UnstablePlantIsNeverCertified) {
  std::mt19937_64 gen(10);
  for (int trial = 0; trial < 10; ++trial) {
    MatrixXd a = stable_matrix(3, 1.05 + 0.1 * trial, gen);
    auto aug = zero_controller(a, testutil::random_matrix(3, 1, gen), 1, 3, 1, 1);
    for (int k = 0; k < 5; ++k) {
      MatrixXd g = testutil::random_matrix(5, 5, gen);
      MatrixXd p = g * g.transpose() + MatrixXd::Identity(5, 5);
      auto cert = check_certificate(aug, IqcMultipliers::uniform(1, 1.0, 0, 0, 0), p, 1e-4);
      EXPECT_FALSE(cert.certified());
      // V = x' P_x x grows along the open loop from the dominant eigendirection.
      Eigen::EigenSolver<MatrixXd> es(a);
      Eigen::Index top;
      es.eigenvalues().cwiseAbs().maxCoeff(&top);
      VectorXd x = es.eigenvectors().col(top).real();
      if (std::abs(es.eigenvalues()(top).imag()) > 0) x += es.eigenvectors().col(top).imag();
      MatrixXd px = p.topLeftCorner(3, 3);
      const double v0 = x.dot(px * x);
      for (int t = 0; t < 200; ++t) x = a * x;
      EXPECT_GT(x.dot(px * x), v0);
    }
    EXPECT_FALSE(search_certificate(aug, {}).certified());
  }
}

TEST(Certificate, RejectsBadArguments) {
  std::mt19937_64 gen(11);
  MatrixXd a = stable_matrix(2, 0.5, gen);
  auto aug = zero_controller(a, testutil::random_matrix(2, 1, gen), 1, 2, 1, 1);
  MatrixXd p = MatrixXd::Identity(4, 4);
  auto mult = IqcMultipliers::uniform(1, 1, 0, 0, 0);
  EXPECT_THROW(check_certificate(aug, mult, p, 0.0), InvalidArgument);
  EXPECT_THROW(check_certificate(aug, mult, p, -1.0), InvalidArgument);
  MatrixXd asym = p;
  asym(0, 1) = 1.0;
  EXPECT_THROW(check_certificate(aug, mult, asym, 1e-4), InvalidArgument);
  EXPECT_THROW(check_certificate(aug, mult, MatrixXd::Identity(3, 3), 1e-4), InvalidArgument);
}

TEST(Certificate, LiteralFormNeverCertifies) {
  std::mt19937_64 gen(12);
  MatrixXd a = stable_matrix(2, 0.5, gen);
  auto aug = zero_controller(a, testutil::random_matrix(2, 1, gen), 1, 2, 1, 1);
  MatrixXd p = lyapunov_seeded_p(aug, a, 1e-4);
  auto cert =
      check_certificate(aug, IqcMultipliers::uniform(1, 1, 0, 0, 0), p, 1e-4, LmiForm::literal);
  EXPECT_FALSE(cert.certified());
  EXPECT_FALSE(search_certificate(aug, {60, 1e-4, 1, LmiForm::literal}).certified());
}

TEST(Search, ZeroControllerIsCertified) {
  std::mt19937_64 gen(13);
  for (int trial = 0; trial < 3; ++trial) {
    MatrixXd a = stable_matrix(4, 0.9, gen);
    auto aug = zero_controller(a, testutil::random_matrix(4, 2, gen), 2, 2, 1, 1);
    auto cert = search_certificate(aug, {});
    EXPECT_TRUE(cert.certified()) << cert.max_eig;
    EXPECT_TRUE(std::isinf(cert.roa_level));
  }
}

TEST(Search, UnstableLinearisationIsGated) {
  std::mt19937_64 gen(14);
  MatrixXd a = stable_matrix(2, 1.3, gen);
  auto aug = zero_controller(a, testutil::random_matrix(2, 1, gen), 1, 2, 1, 1);
  auto cert = search_certificate(aug, {});
  EXPECT_FALSE(cert.certified());
  ASSERT_FALSE(cert.notes.empty());
  EXPECT_NE(cert.notes[0].find("not Schur stable"), std::string::npos);
}

TEST(Search, CertifiedSmallControllerDecaysInsideEllipsoid) {
  std::mt19937_64 gen(15);
  auto topo = graph::Topology::path(2);
  auto sys = plant::generate_system(topo, 1, 1, 0.8, 0.0, 3);
  std::vector<NodeWeights> ws;
  for (int i = 0; i < 2; ++i) ws.push_back(testutil::random_weights(1, 1, 1, gen, 0.2));
  auto s = graph::shift_operator(topo, graph::ShiftKind::normalized_adjacency).matrix;
  auto blocks = grnn::stacked_weight_blocks(ws);
  auto inv = invariant_input_box(blocks.k1, grnn::state_feedback_map(blocks, s, 1),
                                 Box::symmetric(2, 3.0), Activation::tanh());
  auto aug = build_augmented(sys, ws, s, activation_bounds(Activation::tanh(), inv.h));
  auto cert = search_certificate(aug, {});
  ASSERT_TRUE(cert.certified()) << cert.max_eig;
  MatrixXd px = cert.p_x();
  Eigen::LLT<MatrixXd> llt(px);
  const double level = cert.ellipsoid_level();
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    VectorXd d(2);
    d << nd(gen), nd(gen);
    VectorXd x0 = d / std::sqrt(d.dot(px * d)) * std::sqrt(level);
    auto traj = simulate_augmented(aug, Activation::tanh(), x0, 2000);
    EXPECT_LT(traj.xi.back().head(2).norm(), 1e-6 * x0.norm());
    for (const auto& h : traj.h) EXPECT_TRUE(aug.bounds.input.contains(h, 1e-9));
  }
}

TEST(CertificateJson, Keys) {
  std::mt19937_64 gen(16);
  MatrixXd a = stable_matrix(2, 0.5, gen);
  auto aug = zero_controller(a, testutil::random_matrix(2, 1, gen), 1, 2, 1, 1);
  auto doc = to_json(search_certificate(aug, {}));
  for (const char* key : {"verdict", "epsilon", "max_eig", "p_min_eig", "multipliers", "box", "notes"})
    EXPECT_TRUE(doc.contains(key)) << key;
  EXPECT_EQ(doc["verdict"], "certified");
}
