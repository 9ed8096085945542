#include "netgrnn/grnn.hpp"

#include <algorithm>
#include <cmath>

#include "netgrnn/errors.hpp"
#include "netgrnn/io.hpp"

namespace netgrnn::grnn {

namespace {
using Eigen::Index;
Index idx(std::size_t v) { return static_cast<Index>(v); }
}  // namespace

Activation Activation::parse(const std::string& text) {
  if (text == "tanh") return tanh();
  if (text == "relu") return relu();
  if (text == "sigmoid") return sigmoid();
  if (text == "leaky_relu") return leaky_relu(0.01);
  const std::string prefix = "leaky_relu:";
  if (text.rfind(prefix, 0) == 0) {
    try {
      const double a = std::stod(text.substr(prefix.size()));
      if (!(a >= 0.0 && a < 1.0)) throw InvalidArgument("leaky_relu slope must be in [0, 1)");
      return leaky_relu(a);
    } catch (const std::logic_error&) {
      throw InvalidArgument("bad leaky_relu slope in '" + text + "'");
    }
  }
  throw InvalidArgument("unknown activation: " + text);
}

double Activation::operator()(double v) const {
  switch (kind) {
    case ActivationKind::tanh: return std::tanh(v);
    case ActivationKind::relu: return v > 0.0 ? v : 0.0;
    case ActivationKind::leaky_relu: return v > 0.0 ? v : leak * v;
    case ActivationKind::sigmoid: return 1.0 / (1.0 + std::exp(-v));
  }
  return v;
}

double Activation::derivative(double v) const {
  switch (kind) {
    case ActivationKind::tanh: {
      const double t = std::tanh(v);
      return 1.0 - t * t;
    }
    case ActivationKind::relu: return v > 0.0 ? 1.0 : 0.0;
    case ActivationKind::leaky_relu: return v > 0.0 ? 1.0 : leak;
    case ActivationKind::sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

Eigen::RowVectorXd Activation::apply(const Eigen::RowVectorXd& h) const {
  Eigen::RowVectorXd out(h.size());
  for (Index k = 0; k < h.size(); ++k) out(k) = (*this)(h(k));
  return out;
}

Eigen::RowVectorXd Activation::apply_derivative(const Eigen::RowVectorXd& h) const {
  Eigen::RowVectorXd out(h.size());
  for (Index k = 0; k < h.size(); ++k) out(k) = derivative(h(k));
  return out;
}

std::string Activation::name() const {
  switch (kind) {
    case ActivationKind::tanh: return "tanh";
    case ActivationKind::relu: return "relu";
    case ActivationKind::leaky_relu: return "leaky_relu:" + io::format_double(leak);
    case ActivationKind::sigmoid: return "sigmoid";
  }
  return "tanh";
}

NodeWeights NodeWeights::zeros(std::size_t n, std::size_t m, std::size_t p) {
  return {Eigen::MatrixXd::Zero(idx(p), idx(p)), Eigen::MatrixXd::Zero(idx(n), idx(p)),
          Eigen::MatrixXd::Zero(idx(n), idx(p)), Eigen::MatrixXd::Zero(idx(p), idx(m))};
}

NodeWeights NodeWeights::uniform(std::size_t n, std::size_t m, std::size_t p, double low,
                                 double high, Rng& rng) {
  NodeWeights w = zeros(n, m, p);
  std::uniform_real_distribution<double> dist(low, high);
  for (int k = 1; k <= 4; ++k) {
    auto& s = w.slot(k);
    for (Index r = 0; r < s.rows(); ++r)
      for (Index c = 0; c < s.cols(); ++c) s(r, c) = dist(rng);
  }
  return w;
}

void NodeWeights::validate() const {
  const Index p = theta1.rows();
  const Index n = theta2.rows();
  if (p == 0 || n == 0 || theta4.cols() == 0) throw InvalidArgument("weights: empty dimension");
  if (theta1.cols() != p || theta2.cols() != p || theta3.rows() != n || theta3.cols() != p ||
      theta4.rows() != p)
    throw InvalidArgument("weights: inconsistent Theta shapes");
  for (int k = 1; k <= 4; ++k)
    if (!slot(k).allFinite()) throw InvalidArgument("weights: non-finite entry");
}

Eigen::MatrixXd& NodeWeights::slot(int k) {
  switch (k) {
    case 1: return theta1;
    case 2: return theta2;
    case 3: return theta3;
    case 4: return theta4;
    default: throw InvalidArgument("weight slot must be 1..4");
  }
}

const Eigen::MatrixXd& NodeWeights::slot(int k) const {
  return const_cast<NodeWeights*>(this)->slot(k);
}

LocalOutput local_forward(std::size_t node, const NodeWeights& weights,
                          const Eigen::RowVectorXd& z_prev, const Eigen::RowVectorXd& x,
                          std::span<const NeighborRow> neighbors, const Activation& activation,
                          const graph::Topology& topology) {
  const auto expected = topology.neighbors(node);
  std::vector<const NeighborRow*> rows;
  rows.reserve(neighbors.size());
  for (const auto& row : neighbors) {
    if (!topology.is_local(node, row.node))
      throw LocalityViolation(node, row.node, "local_forward");
    rows.push_back(&row);
  }
  std::sort(rows.begin(), rows.end(),
            [](const NeighborRow* a, const NeighborRow* b) { return a->node < b->node; });
  for (std::size_t k = 1; k < rows.size(); ++k)
    if (rows[k]->node == rows[k - 1]->node)
      throw InvalidArgument("local_forward: duplicate neighbour row");
  if (rows.size() != expected.size() + 1)
    throw LocalityViolation(node, rows.size() <= expected.size() ? node : rows.back()->node,
                            "local_forward (incomplete neighbourhood)");

  const Index n = weights.theta2.rows();
  if (x.size() != n || z_prev.size() != weights.theta1.rows())
    throw InvalidArgument("local_forward: row dimension mismatch");
  LocalOutput out;
  out.aggregate = Eigen::RowVectorXd::Zero(n);
  for (const NeighborRow* row : rows) {
    if (row->state.size() != n) throw InvalidArgument("local_forward: neighbour state size");
    if (row->shift != 0.0) out.aggregate += row->shift * row->state;
  }
  out.h = z_prev * weights.theta1 + x * weights.theta2 + out.aggregate * weights.theta3;
  out.z = activation.apply(out.h);
  out.u = out.z * weights.theta4;
  return out;
}

NetworkOutput centralized_forward(const NodeWeights& shared, const Eigen::MatrixXd& z_prev,
                                  const Eigen::MatrixXd& x, const Eigen::MatrixXd& shift,
                                  const Activation& activation) {
  shared.validate();
  if (shift.rows() != x.rows() || shift.cols() != x.rows() || z_prev.rows() != x.rows() ||
      x.cols() != shared.theta2.rows() || z_prev.cols() != shared.theta1.rows())
    throw InvalidArgument("centralized_forward: dimension mismatch");
  NetworkOutput out;
  out.aggregate = shift * x;
  out.h = z_prev * shared.theta1 + x * shared.theta2 + out.aggregate * shared.theta3;
  out.z = out.h.unaryExpr([&](double v) { return activation(v); });
  out.u = out.z * shared.theta4;
  return out;
}

NetworkOutput network_forward(std::span<const NodeWeights> weights, const Eigen::MatrixXd& z_prev,
                              const Eigen::MatrixXd& x,
                              const Eigen::SparseMatrix<double, Eigen::RowMajor>& shift,
                              const Activation& activation) {
  const Index nodes = x.rows();
  if (static_cast<Index>(weights.size()) != nodes || shift.rows() != nodes ||
      shift.cols() != nodes || z_prev.rows() != nodes)
    throw InvalidArgument("network_forward: dimension mismatch");
  const Index p = z_prev.cols();
  const Index m = weights.empty() ? 0 : weights[0].theta4.cols();
  NetworkOutput out;
  out.aggregate = shift * x;
  out.h.resize(nodes, p);
  out.z.resize(nodes, p);
  out.u.resize(nodes, m);
  for (Index i = 0; i < nodes; ++i) {
    const auto& w = weights[static_cast<std::size_t>(i)];
    const Eigen::RowVectorXd h = z_prev.row(i) * w.theta1 + x.row(i) * w.theta2 +
                                 out.aggregate.row(i) * w.theta3;
    const Eigen::RowVectorXd z = activation.apply(h);
    out.h.row(i) = h;
    out.z.row(i) = z;
    out.u.row(i) = z * w.theta4;
  }
  return out;
}

StackedBlocks stacked_weight_blocks(std::span<const NodeWeights> weights) {
  if (weights.empty()) throw InvalidArgument("stacked_weight_blocks: no nodes");
  const Index nodes = static_cast<Index>(weights.size());
  const Index p = weights[0].theta1.rows();
  const Index n = weights[0].theta2.rows();
  const Index m = weights[0].theta4.cols();
  StackedBlocks s{Eigen::MatrixXd::Zero(p * nodes, p * nodes),
                  Eigen::MatrixXd::Zero(p * nodes, n * nodes),
                  Eigen::MatrixXd::Zero(p * nodes, n * nodes),
                  Eigen::MatrixXd::Zero(m * nodes, p * nodes)};
  for (Index i = 0; i < nodes; ++i) {
    const auto& w = weights[static_cast<std::size_t>(i)];
    w.validate();
    s.k1.block(i * p, i * p, p, p) = w.theta1.transpose();
    s.k2.block(i * p, i * n, p, n) = w.theta2.transpose();
    s.k3.block(i * p, i * n, p, n) = w.theta3.transpose();
    s.k4.block(i * m, i * p, m, p) = w.theta4.transpose();
  }
  return s;
}

Eigen::MatrixXd state_feedback_map(const StackedBlocks& blocks, const Eigen::MatrixXd& shift,
                                   std::size_t state_dim) {
  const Index n = idx(state_dim);
  const Index nodes = shift.rows();
  Eigen::MatrixXd expanded = Eigen::MatrixXd::Zero(nodes * n, nodes * n);
  for (Index i = 0; i < nodes; ++i)
    for (Index j = 0; j < nodes; ++j)
      if (shift(i, j) != 0.0)
        expanded.block(i * n, j * n, n, n) = shift(i, j) * Eigen::MatrixXd::Identity(n, n);
  return blocks.k2 + blocks.k3 * expanded;
}

Eigen::SparseMatrix<double, Eigen::RowMajor> to_sparse(const Eigen::MatrixXd& shift) {
  return shift.sparseView(0.0, 0.0);
}

GrnnController::GrnnController(std::vector<NodeWeights> weights, const Eigen::MatrixXd& shift,
                               Activation activation)
    : weights_(std::move(weights)), shift_(to_sparse(shift)), activation_(activation) {
  if (weights_.empty() || static_cast<Index>(weights_.size()) != shift.rows())
    throw InvalidArgument("GrnnController: one weight set per node required");
  for (const auto& w : weights_) w.validate();
  state_dim_ = weights_[0].state_dim();
  reset();
}

void GrnnController::reset() {
  z_prev_ = Eigen::MatrixXd::Zero(idx(weights_.size()), idx(weights_[0].hidden_dim()));
  h_last_ = z_prev_;
}

Eigen::VectorXd GrnnController::control(const Eigen::VectorXd& x) {
  const Index nodes = idx(weights_.size());
  if (x.size() != nodes * idx(state_dim_))
    throw InvalidArgument("GrnnController: state dimension mismatch");
  const Eigen::MatrixXd X =
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
          x.data(), nodes, idx(state_dim_));
  NetworkOutput out = network_forward(weights_, z_prev_, X, shift_, activation_);
  z_prev_ = out.z;
  h_last_ = out.h;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> u = out.u;
  return Eigen::Map<const Eigen::VectorXd>(u.data(), u.size());
}

nlohmann::json to_json(std::span<const NodeWeights> weights, const Activation& activation) {
  nlohmann::json nodes = nlohmann::json::array();
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto& w = weights[i];
    nodes.push_back({{"node", i},
                     {"theta1", io::matrix_to_json(w.theta1)},
                     {"theta2", io::matrix_to_json(w.theta2)},
                     {"theta3", io::matrix_to_json(w.theta3)},
                     {"theta4", io::matrix_to_json(w.theta4)}});
  }
  const std::size_t n = weights.empty() ? 0 : weights[0].state_dim();
  const std::size_t m = weights.empty() ? 0 : weights[0].input_dim();
  const std::size_t p = weights.empty() ? 0 : weights[0].hidden_dim();
  return {{"n", n}, {"m", m}, {"p", p}, {"activation", activation.name()}, {"nodes", nodes}};
}

std::vector<NodeWeights> weights_from_json(const nlohmann::json& doc) {
  try {
    const auto n = idx(doc.at("n").get<std::size_t>());
    const auto m = idx(doc.at("m").get<std::size_t>());
    const auto p = idx(doc.at("p").get<std::size_t>());
    std::vector<NodeWeights> out(doc.at("nodes").size());
    std::vector<bool> seen(out.size(), false);
    for (const auto& entry : doc.at("nodes")) {
      const auto i = entry.at("node").get<std::size_t>();
      if (i >= out.size() || seen[i]) throw InvalidArgument("weights: bad or duplicate node id");
      seen[i] = true;
      out[i] = {io::matrix_from_json(entry.at("theta1"), p, p),
                io::matrix_from_json(entry.at("theta2"), n, p),
                io::matrix_from_json(entry.at("theta3"), n, p),
                io::matrix_from_json(entry.at("theta4"), p, m)};
      out[i].validate();
    }
    return out;
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidArgument(std::string("malformed weights document: ") + ex.what());
  }
}

Activation activation_from_json(const nlohmann::json& doc) {
  return Activation::parse(doc.value("activation", std::string("tanh")));
}

}  // namespace netgrnn::grnn
