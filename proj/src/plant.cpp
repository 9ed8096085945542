#include "netgrnn/plant.hpp"

#include <cmath>
#include <ostream>
#include <string>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "netgrnn/errors.hpp"
#include "netgrnn/io.hpp"

namespace netgrnn::plant {

namespace {

using Eigen::Index;

Index idx(std::size_t v) { return static_cast<Index>(v); }

SparseRowMatrix block_sparse(const Eigen::MatrixXd& dense, const graph::Topology& topology,
                             std::size_t row_dim, std::size_t col_dim) {
  std::vector<Eigen::Triplet<double>> entries;
  for (std::size_t i = 0; i < topology.size(); ++i) {
    auto add_block = [&](std::size_t j) {
      for (std::size_t r = 0; r < row_dim; ++r)
        for (std::size_t c = 0; c < col_dim; ++c) {
          const double v = dense(idx(i * row_dim + r), idx(j * col_dim + c));
          if (v != 0.0) entries.emplace_back(idx(i * row_dim + r), idx(j * col_dim + c), v);
        }
    };
    add_block(i);
    for (std::size_t j : topology.neighbors(i)) add_block(j);
  }
  SparseRowMatrix s(dense.rows(), dense.cols());
  s.setFromTriplets(entries.begin(), entries.end());
  return s;
}

void check_block_pattern(const Eigen::MatrixXd& m, const graph::Topology& topology,
                         std::size_t row_dim, std::size_t col_dim, const char* name) {
  for (std::size_t i = 0; i < topology.size(); ++i)
    for (std::size_t j = 0; j < topology.size(); ++j) {
      if (topology.is_local(i, j)) continue;
      const auto block = m.block(idx(i * row_dim), idx(j * col_dim), idx(row_dim), idx(col_dim));
      if (!block.isZero(0.0))
        throw InvalidArgument(std::string(name) + " block (" + std::to_string(i) + "," +
                              std::to_string(j) + ") must be zero for this topology");
    }
}

double spectral_norm(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  return svd.singularValues()(0);
}

}  // namespace

NetworkedSystem::NetworkedSystem(graph::Topology topology, std::size_t state_dim,
                                 std::size_t input_dim, Eigen::MatrixXd a, Eigen::MatrixXd b,
                                 double noise_std)
    : topology_(std::move(topology)),
      state_dim_(state_dim),
      input_dim_(input_dim),
      a_(std::move(a)),
      b_(std::move(b)),
      noise_std_(noise_std) {
  if (state_dim_ == 0 || input_dim_ == 0)
    throw InvalidArgument("state and input dimensions must be positive");
  if (!(noise_std_ >= 0.0)) throw InvalidArgument("noise_std must be >= 0");
  const auto ns = idx(state_size());
  const auto nu = idx(input_size());
  if (a_.rows() != ns || a_.cols() != ns) throw InvalidArgument("A must be nN x nN");
  if (b_.rows() != ns || b_.cols() != nu) throw InvalidArgument("B must be nN x mN");
  check_block_pattern(a_, topology_, state_dim_, state_dim_, "A");
  check_block_pattern(b_, topology_, state_dim_, input_dim_, "B");
  a_sparse_ = block_sparse(a_, topology_, state_dim_, state_dim_);
  b_sparse_ = block_sparse(b_, topology_, state_dim_, input_dim_);
}

Eigen::MatrixXd NetworkedSystem::a_block(std::size_t i, std::size_t j) const {
  return a_.block(idx(i * state_dim_), idx(j * state_dim_), idx(state_dim_), idx(state_dim_));
}

Eigen::MatrixXd NetworkedSystem::b_block(std::size_t i, std::size_t j) const {
  return b_.block(idx(i * state_dim_), idx(j * input_dim_), idx(state_dim_), idx(input_dim_));
}

NetworkedSystem generate_system(const graph::Topology& topology, std::size_t state_dim,
                                std::size_t input_dim, double scale, double noise_std,
                                std::uint64_t seed, int max_attempts) {
  if (state_dim == 0 || input_dim == 0) throw InvalidArgument("n and m must be >= 1");
  if (!(scale > 0.0)) throw InvalidArgument("scale must be positive");
  const std::size_t nodes = topology.size();
  const auto ns = idx(nodes * state_dim);
  const auto nu = idx(nodes * input_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Rng rng = make_rng(seed, Stream::dynamics, {static_cast<std::uint64_t>(attempt)});
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(ns, ns);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(ns, nu);
    for (std::size_t i = 0; i < nodes; ++i)
      for (std::size_t j = 0; j < nodes; ++j) {
        if (!topology.is_local(i, j)) continue;
        for (std::size_t r = 0; r < state_dim; ++r)
          for (std::size_t c = 0; c < state_dim; ++c)
            a(idx(i * state_dim + r), idx(j * state_dim + c)) = normal(rng);
        for (std::size_t r = 0; r < state_dim; ++r)
          for (std::size_t c = 0; c < input_dim; ++c)
            b(idx(i * state_dim + r), idx(j * input_dim + c)) = normal(rng);
      }
    const double na = spectral_norm(a);
    const double nb = spectral_norm(b);
    if (na == 0.0 || nb == 0.0) continue;
    a *= scale / na;
    b /= nb;
    if (controllability_rank(a, b) == static_cast<std::size_t>(ns))
      return NetworkedSystem(topology, state_dim, input_dim, std::move(a), std::move(b),
                             noise_std);
  }
  throw NumericalFailure("no controllable system found after " + std::to_string(max_attempts) +
                         " draws; topology may be degenerate");
}

Eigen::VectorXd node_step(const NetworkedSystem& sys, std::size_t node, const Eigen::VectorXd& x,
                          const Eigen::VectorXd& u, Rng* node_rng) {
  const auto n = idx(sys.state_dim());
  const auto m = idx(sys.input_dim());
  const auto i = idx(node);
  Eigen::VectorXd next = sys.a().block(i * n, i * n, n, n) * x.segment(i * n, n) +
                         sys.b().block(i * n, i * m, n, m) * u.segment(i * m, m);
  for (std::size_t js : sys.topology().neighbors(node)) {
    const auto j = idx(js);
    next += sys.a().block(i * n, j * n, n, n) * x.segment(j * n, n);
    next += sys.b().block(i * n, j * m, n, m) * u.segment(j * m, m);
  }
  if (node_rng != nullptr && sys.noise_std() > 0.0) {
    std::normal_distribution<double> noise(0.0, sys.noise_std());
    for (Index k = 0; k < n; ++k) next(k) += noise(*node_rng);
  }
  return next;
}

Eigen::VectorXd step(const NetworkedSystem& sys, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& u, std::span<Rng> node_rngs) {
  if (x.size() != idx(sys.state_size()) || u.size() != idx(sys.input_size()))
    throw InvalidArgument("step: state/control dimension mismatch");
  if (!node_rngs.empty() && node_rngs.size() != sys.nodes())
    throw InvalidArgument("step: need one RNG per node");
  Eigen::VectorXd next = sys.a_sparse() * x + sys.b_sparse() * u;
  if (!node_rngs.empty() && sys.noise_std() > 0.0) {
    const auto n = idx(sys.state_dim());
    for (std::size_t i = 0; i < sys.nodes(); ++i) {
      std::normal_distribution<double> noise(0.0, sys.noise_std());
      for (Index k = 0; k < n; ++k) next(idx(i) * n + k) += noise(node_rngs[i]);
    }
  }
  return next;
}

Eigen::VectorXd step(const NetworkedSystem& sys, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& u, Rng& rng) {
  if (x.size() != idx(sys.state_size()) || u.size() != idx(sys.input_size()))
    throw InvalidArgument("step: state/control dimension mismatch");
  Eigen::VectorXd next = sys.a_sparse() * x + sys.b_sparse() * u;
  if (sys.noise_std() > 0.0) {
    std::normal_distribution<double> noise(0.0, sys.noise_std());
    for (Index k = 0; k < next.size(); ++k) next(k) += noise(rng);
  }
  return next;
}

std::size_t controllability_rank_svd(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Index n = a.rows();
  if (n == 0 || b.cols() == 0) return 0;
  Eigen::MatrixXd ctrb(n, n * b.cols());
  Eigen::MatrixXd block = b;
  for (Index k = 0; k < n; ++k) {
    ctrb.middleCols(k * b.cols(), b.cols()) = block;
    block = a * block;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(ctrb);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  const double tol = 1e-9 * s(0);
  std::size_t rank = 0;
  for (Index k = 0; k < s.size(); ++k)
    if (s(k) > tol) ++rank;
  return rank;
}

std::size_t controllability_rank_pbh(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const Index n = a.rows();
  if (n == 0) return 0;
  if (b.isZero(0.0)) return 0;
  Eigen::EigenSolver<Eigen::MatrixXd> eig(a, false);
  const double scale = std::max(a.norm(), b.norm());
  std::size_t worst = static_cast<std::size_t>(n);
  for (Index k = 0; k < n; ++k) {
    Eigen::MatrixXcd pencil(n, n + b.cols());
    pencil.leftCols(n) = a.cast<std::complex<double>>();
    pencil.leftCols(n).diagonal().array() -= eig.eigenvalues()(k);
    pencil.rightCols(b.cols()) = b.cast<std::complex<double>>();
    Eigen::BDCSVD<Eigen::MatrixXcd> svd(pencil);
    const auto& s = svd.singularValues();
    const double tol = 1e-9 * std::max(scale, s(0));
    std::size_t rank = 0;
    for (Index j = 0; j < s.size(); ++j)
      if (s(j) > tol) ++rank;
    worst = std::min(worst, rank);
  }
  return worst;
}

std::size_t controllability_rank(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() > 50 ? controllability_rank_pbh(a, b) : controllability_rank_svd(a, b);
}

std::size_t controllability_rank(const NetworkedSystem& sys) {
  return controllability_rank(sys.a(), sys.b());
}

LqrSolution solve_lqr(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                      const Eigen::MatrixXd& state_weight, const Eigen::MatrixXd& input_weight,
                      const Eigen::MatrixXd& terminal_weight) {
  const Index n = a.rows();
  if (a.cols() != n || b.rows() != n || state_weight.rows() != n || state_weight.cols() != n ||
      terminal_weight.rows() != n || terminal_weight.cols() != n ||
      input_weight.rows() != b.cols() || input_weight.cols() != b.cols())
    throw InvalidArgument("solve_lqr: dimension mismatch");
  Eigen::LLT<Eigen::MatrixXd> r_check(input_weight);
  if (r_check.info() != Eigen::Success) throw InvalidArgument("R must be positive definite");

  Eigen::MatrixXd p = terminal_weight;
  constexpr int kMaxIterations = 100000;
  for (int it = 1; it <= kMaxIterations; ++it) {
    const Eigen::MatrixXd pb = p * b;
    const Eigen::MatrixXd gram = input_weight + b.transpose() * pb;
    const Eigen::MatrixXd gain = gram.ldlt().solve(pb.transpose() * a);
    Eigen::MatrixXd next = state_weight + a.transpose() * p * a - a.transpose() * pb * gain;
    next = 0.5 * (next + next.transpose());
    const double change = (next - p).cwiseAbs().maxCoeff();
    p = std::move(next);
    if (change <= 1e-10 * std::max(1.0, p.cwiseAbs().maxCoeff())) {
      LqrSolution sol;
      const Eigen::MatrixXd pb2 = p * b;
      sol.k = (input_weight + b.transpose() * pb2).ldlt().solve(pb2.transpose() * a);
      sol.p = p;
      sol.state_weight = state_weight;
      sol.input_weight = input_weight;
      sol.terminal_weight = terminal_weight;
      sol.iterations = it;
      return sol;
    }
    if (!p.allFinite()) break;
  }
  throw NumericalFailure("Riccati iteration did not converge; (A, B) may be near-uncontrollable");
}

LqrSolution solve_lqr(const NetworkedSystem& sys, const Eigen::MatrixXd& state_weight,
                      const Eigen::MatrixXd& input_weight,
                      const Eigen::MatrixXd& terminal_weight) {
  return solve_lqr(sys.a(), sys.b(), state_weight, input_weight, terminal_weight);
}

double riccati_residual(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                        const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                        const Eigen::MatrixXd& p) {
  const Eigen::MatrixXd pb = p * b;
  const Eigen::MatrixXd rhs =
      q + a.transpose() * p * a -
      a.transpose() * pb * (r + b.transpose() * pb).ldlt().solve(pb.transpose() * a);
  return spectral_norm(rhs - p);
}

Eigen::VectorXd Trajectory::node_state(std::size_t t, std::size_t node) const {
  return states.at(t).segment(idx(node * state_dim), idx(state_dim));
}

Eigen::VectorXd Trajectory::node_control(std::size_t t, std::size_t node) const {
  return controls.at(t).segment(idx(node * input_dim), idx(input_dim));
}

Eigen::MatrixXd Trajectory::state_matrix(std::size_t t) const {
  const auto& x = states.at(t);
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      x.data(), idx(nodes), idx(state_dim));
}

Trajectory rollout(const NetworkedSystem& sys, Controller& controller, const Eigen::VectorXd& x0,
                   std::size_t horizon, std::span<Rng> node_rngs) {
  if (x0.size() != idx(sys.state_size())) throw InvalidArgument("rollout: x0 dimension mismatch");
  Trajectory traj;
  traj.nodes = sys.nodes();
  traj.state_dim = sys.state_dim();
  traj.input_dim = sys.input_dim();
  traj.states.reserve(horizon + 1);
  traj.controls.reserve(horizon);
  traj.states.push_back(x0);
  for (std::size_t t = 0; t < horizon; ++t) {
    Eigen::VectorXd u = controller.control(traj.states.back());
    if (u.size() != idx(sys.input_size()))
      throw InvalidArgument("rollout: controller returned wrong control dimension");
    traj.states.push_back(step(sys, traj.states.back(), u, node_rngs));
    traj.controls.push_back(std::move(u));
  }
  return traj;
}

Eigen::VectorXd sample_initial_state(std::size_t nodes, std::size_t state_dim, double mean,
                                     double stddev, std::span<Rng> node_rngs) {
  if (node_rngs.size() != nodes) throw InvalidArgument("need one RNG per node");
  Eigen::VectorXd x(idx(nodes * state_dim));
  for (std::size_t i = 0; i < nodes; ++i) {
    std::normal_distribution<double> normal(mean, stddev);
    for (std::size_t k = 0; k < state_dim; ++k) x(idx(i * state_dim + k)) = normal(node_rngs[i]);
  }
  return x;
}

std::vector<Rng> node_streams(std::uint64_t seed, Stream stream, std::size_t nodes,
                              std::uint64_t a, std::uint64_t b) {
  std::vector<Rng> rngs;
  rngs.reserve(nodes);
  for (std::size_t i = 0; i < nodes; ++i)
    rngs.push_back(make_rng(seed, stream, {a, b, static_cast<std::uint64_t>(i)}));
  return rngs;
}

double quadratic_cost(const Trajectory& traj, const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                      const Eigen::MatrixXd& terminal) {
  double cost = 0.0;
  for (std::size_t t = 0; t < traj.horizon(); ++t) {
    const auto& x = traj.states[t];
    const auto& u = traj.controls[t];
    cost += x.dot(q * x) + u.dot(r * u);
  }
  const auto& xf = traj.states.back();
  return cost + xf.dot(terminal * xf);
}

nlohmann::json to_json(const NetworkedSystem& sys, const std::string& topology_ref) {
  return {{"N", sys.nodes()},
          {"n", sys.state_dim()},
          {"m", sys.input_dim()},
          {"A", io::matrix_to_json(sys.a())},
          {"B", io::matrix_to_json(sys.b())},
          {"noise_std", sys.noise_std()},
          {"topology_ref", topology_ref}};
}

NetworkedSystem system_from_json(const nlohmann::json& doc, const graph::Topology& topology) {
  try {
    const auto nodes = doc.at("N").get<std::size_t>();
    const auto n = doc.at("n").get<std::size_t>();
    const auto m = doc.at("m").get<std::size_t>();
    if (nodes != topology.size()) throw InvalidArgument("system N does not match topology");
    auto a = io::matrix_from_json(doc.at("A"), idx(nodes * n), idx(nodes * n));
    auto b = io::matrix_from_json(doc.at("B"), idx(nodes * n), idx(nodes * m));
    return NetworkedSystem(topology, n, m, std::move(a), std::move(b),
                           doc.at("noise_std").get<double>());
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidArgument(std::string("malformed system document: ") + ex.what());
  }
}

void write_trajectory_csv(std::ostream& out, const Trajectory& traj) {
  out << "t,node";
  for (std::size_t k = 0; k < traj.state_dim; ++k) out << ",x" << k;
  for (std::size_t k = 0; k < traj.input_dim; ++k) out << ",u" << k;
  out << '\n';
  for (std::size_t t = 0; t < traj.states.size(); ++t) {
    for (std::size_t i = 0; i < traj.nodes; ++i) {
      out << t << ',' << i;
      const auto x = traj.node_state(t, i);
      for (Index k = 0; k < x.size(); ++k) out << ',' << io::format_double(x(k));
      if (t < traj.horizon()) {
        const auto u = traj.node_control(t, i);
        for (Index k = 0; k < u.size(); ++k) out << ',' << io::format_double(u(k));
      } else {
        for (std::size_t k = 0; k < traj.input_dim; ++k) out << ',';
      }
      out << '\n';
    }
  }
}

}  // namespace netgrnn::plant
