#include "netgrnn/stability.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "netgrnn/errors.hpp"
#include "netgrnn/io.hpp"
#include "netgrnn/parallel.hpp"

namespace netgrnn::stability {

namespace {
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
Index idx(std::size_t v) { return static_cast<Index>(v); }
constexpr double kInf = std::numeric_limits<double>::infinity();

MatrixXd symmetrize(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

Eigen::SelfAdjointEigenSolver<MatrixXd> eig(const MatrixXd& m, bool vectors) {
  return Eigen::SelfAdjointEigenSolver<MatrixXd>(
      symmetrize(m), vectors ? Eigen::ComputeEigenvectors : Eigen::EigenvaluesOnly);
}

double max_eig(const MatrixXd& m) { return eig(m, false).eigenvalues().maxCoeff(); }
double min_eig(const MatrixXd& m) { return eig(m, false).eigenvalues().minCoeff(); }
}  // namespace

Box Box::symmetric(std::size_t size, double radius) {
  if (!(radius >= 0.0)) throw InvalidArgument("box radius must be >= 0");
  return {VectorXd::Constant(idx(size), -radius), VectorXd::Constant(idx(size), radius)};
}

Box Box::point(const VectorXd& v) { return {v, v}; }

bool Box::contains(const VectorXd& v, double tol) const {
  if (v.size() != lower.size()) return false;
  for (Index k = 0; k < v.size(); ++k)
    if (v(k) < lower(k) - tol || v(k) > upper(k) + tol) return false;
  return true;
}

bool Box::contains(const Box& inner, double tol) const {
  if (inner.size() != size()) return false;
  for (Index k = 0; k < lower.size(); ++k)
    if (inner.lower(k) < lower(k) - tol || inner.upper(k) > upper(k) + tol) return false;
  return true;
}

bool Box::contains_zero() const {
  for (Index k = 0; k < lower.size(); ++k)
    if (!(lower(k) <= 0.0 && upper(k) >= 0.0)) return false;
  return true;
}

void Box::validate() const {
  if (lower.size() != upper.size()) throw InvalidArgument("box bounds differ in length");
  for (Index k = 0; k < lower.size(); ++k)
    if (std::isnan(lower(k)) || std::isnan(upper(k)) || lower(k) > upper(k))
      throw InvalidArgument("box lower bound exceeds upper bound");
}

Box interval_product(const MatrixXd& m, const Box& box) {
  box.validate();
  if (m.cols() != box.lower.size()) throw InvalidArgument("interval_product: size mismatch");
  Box out{VectorXd::Zero(m.rows()), VectorXd::Zero(m.rows())};
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      const double a = m(i, j);
      if (a == 0.0) continue;
      const double lo = a > 0.0 ? a * box.lower(j) : a * box.upper(j);
      const double hi = a > 0.0 ? a * box.upper(j) : a * box.lower(j);
      out.lower(i) += lo;
      out.upper(i) += hi;
    }
  }
  return out;
}

Box interval_sum(const Box& a, const Box& b) {
  if (a.size() != b.size()) throw InvalidArgument("interval_sum: size mismatch");
  return {a.lower + b.lower, a.upper + b.upper};
}

SectorSlopeBounds activation_bounds(const grnn::Activation& act, const Box& h_box) {
  h_box.validate();
  if (act.kind == grnn::ActivationKind::sigmoid)
    throw InvalidArgument("sigmoid has no equilibrium at the origin; use tanh or leaky_relu");
  if (!h_box.contains_zero()) throw InvalidArgument("input box must contain 0");
  const Index r = h_box.lower.size();
  SectorSlopeBounds b{h_box, VectorXd(r), VectorXd::Ones(r), VectorXd(r), VectorXd::Ones(r)};
  for (Index k = 0; k < r; ++k) {
    if (act.kind == grnn::ActivationKind::tanh) {
      auto ratio = [](double v) {
        if (v == 0.0) return 1.0;
        if (std::isinf(v)) return 0.0;
        return std::tanh(v) / v;
      };
      b.sector_lower(k) = std::min(ratio(h_box.lower(k)), ratio(h_box.upper(k)));
      const double reach = std::max(std::abs(h_box.lower(k)), std::abs(h_box.upper(k)));
      b.slope_lower(k) = std::isinf(reach) ? 0.0 : act.derivative(reach);
    } else {
      b.sector_lower(k) = act.leak;
      b.slope_lower(k) = act.leak;
    }
  }
  return b;
}

Box activation_range(const grnn::Activation& act, std::size_t size) {
  switch (act.kind) {
    case grnn::ActivationKind::tanh: return Box::symmetric(size, 1.0);
    case grnn::ActivationKind::sigmoid:
      return {VectorXd::Zero(idx(size)), VectorXd::Ones(idx(size))};
    case grnn::ActivationKind::relu:
      return {VectorXd::Zero(idx(size)), VectorXd::Constant(idx(size), kInf)};
    case grnn::ActivationKind::leaky_relu:
      return {VectorXd::Constant(idx(size), act.leak > 0.0 ? -kInf : 0.0),
              VectorXd::Constant(idx(size), kInf)};
  }
  return Box::symmetric(size, kInf);
}

Box activation_image(const grnn::Activation& act, const Box& h_box) {
  h_box.validate();
  Box out = h_box;
  for (Index k = 0; k < h_box.lower.size(); ++k) {
    out.lower(k) = act(h_box.lower(k));
    out.upper(k) = act(h_box.upper(k));
  }
  return out;
}

Box input_box(const MatrixXd& k1, const MatrixXd& state_map, const Box& x_box, const Box& z_box) {
  if (k1.rows() != state_map.rows() || k1.cols() != k1.rows())
    throw InvalidArgument("input_box: K1 must be square with as many rows as F");
  return interval_sum(interval_product(k1, z_box), interval_product(state_map, x_box));
}

Box input_box(const grnn::StackedBlocks& blocks, const MatrixXd& shift, std::size_t state_dim,
              const Box& x_box, const Box& z_box) {
  return input_box(blocks.k1, grnn::state_feedback_map(blocks, shift, state_dim), x_box, z_box);
}

InvariantBox invariant_input_box(const MatrixXd& k1, const MatrixXd& state_map, const Box& x_box,
                                 const grnn::Activation& act, int max_iterations) {
  if (!x_box.contains_zero()) throw InvalidArgument("state box must contain 0");
  const std::size_t r = static_cast<std::size_t>(k1.rows());
  const Box hx = interval_product(state_map, x_box);
  const Box range = activation_range(act, r);
  const bool bounded = range.lower.allFinite() && range.upper.allFinite();
  constexpr double tol = 1e-12;

  InvariantBox res;
  Box z = bounded ? range : Box::point(VectorXd::Zero(idx(r)));
  for (int it = 1; it <= max_iterations; ++it) {
    const Box h = interval_sum(interval_product(k1, z), hx);
    Box image = activation_image(act, h);
    Box next = z;
    for (Index k = 0; k < idx(r); ++k) {
      if (bounded) {
        next.lower(k) = std::max(z.lower(k), image.lower(k));
        next.upper(k) = std::min(z.upper(k), image.upper(k));
      } else {
        next.lower(k) = std::min(z.lower(k), image.lower(k));
        next.upper(k) = std::max(z.upper(k), image.upper(k));
      }
    }
    if (!next.lower.allFinite() || !next.upper.allFinite())
      throw NumericalFailure("input box iteration diverged");
    const double change = std::max((next.lower - z.lower).cwiseAbs().maxCoeff(),
                                   (next.upper - z.upper).cwiseAbs().maxCoeff());
    const double size = std::max(1.0, next.upper.cwiseAbs().maxCoeff());
    z = next;
    res.iterations = it;
    if (change <= tol * size) {
      res.converged = true;
      break;
    }
  }
  if (!res.converged && !bounded) {
    // One widening attempt: accept a doubled box only if it is invariant.
    Box wide{2.0 * z.lower, 2.0 * z.upper};
    const Box image = activation_image(act, interval_sum(interval_product(k1, wide), hx));
    if (!wide.contains(image))
      throw NumericalFailure("input box iteration did not converge for an unbounded activation");
    z = wide;
  }
  res.z = z;
  res.h = interval_sum(interval_product(k1, z), hx);
  return res;
}

IqcMultipliers IqcMultipliers::uniform(std::size_t size, double mu, double eta0,
                                       double eta_lower, double eta_upper) {
  IqcMultipliers m{VectorXd::Constant(idx(size), mu), VectorXd::Constant(idx(size), eta0),
                   VectorXd::Constant(idx(size), eta_lower),
                   VectorXd::Constant(idx(size), eta_upper)};
  m.validate(size);
  return m;
}

void IqcMultipliers::validate(std::size_t size) const {
  const Index r = idx(size);
  if (mu.size() != r || eta0.size() != r || eta_lower.size() != r || eta_upper.size() != r)
    throw InvalidArgument("IQC multipliers must have length pN");
  for (Index k = 0; k < r; ++k) {
    if (!(mu(k) >= 0.0) || !(eta0(k) >= 0.0) || !(eta_lower(k) >= 0.0) || !(eta_upper(k) >= 0.0))
      throw InvalidArgument("IQC multipliers must be nonnegative");
    if (eta0(k) < eta_lower(k) + eta_upper(k))
      throw InvalidArgument("IQC multipliers violate eta0 >= eta_lower + eta_upper");
  }
}

MatrixXd q_off(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size()) throw InvalidArgument("q_off: length mismatch");
  const Index r = a.size();
  MatrixXd q = MatrixXd::Zero(2 * r, 2 * r);
  q.topRightCorner(r, r) = a.asDiagonal();
  q.bottomLeftCorner(r, r) = b.asDiagonal();
  return q;
}

VectorXd IqcRealization::output(const VectorXd& psi, const VectorXd& h, const VectorXd& z) const {
  return c * psi + d_h * h + d_z * z;
}

VectorXd IqcRealization::next_state(const VectorXd& h, const VectorXd& z) const {
  return b_h * h + b_z * z;
}

IqcRealization build_iqc(const SectorSlopeBounds& bounds, const IqcMultipliers& mult) {
  const std::size_t rs = bounds.size();
  mult.validate(rs);
  const Index r = idx(rs);
  const MatrixXd I = MatrixXd::Identity(r, r);
  IqcRealization iqc;
  iqc.a = MatrixXd::Zero(2 * r, 2 * r);
  iqc.b_h.resize(2 * r, r);
  iqc.b_h << MatrixXd((-bounds.slope_upper).asDiagonal()), MatrixXd(bounds.slope_lower.asDiagonal());
  iqc.b_z.resize(2 * r, r);
  iqc.b_z << I, -I;
  iqc.c = MatrixXd::Zero(6 * r, 2 * r);
  iqc.c.bottomRows(2 * r) = MatrixXd::Identity(2 * r, 2 * r);
  iqc.d_h = MatrixXd::Zero(6 * r, r);
  iqc.d_h.block(0, 0, r, r) = bounds.sector_upper.asDiagonal();
  iqc.d_h.block(r, 0, r, r) = (-bounds.sector_lower).asDiagonal();
  iqc.d_h.block(2 * r, 0, r, r) = bounds.slope_upper.asDiagonal();
  iqc.d_h.block(3 * r, 0, r, r) = (-bounds.slope_lower).asDiagonal();
  iqc.d_z = MatrixXd::Zero(6 * r, r);
  iqc.d_z.block(0, 0, r, r) = -I;
  iqc.d_z.block(r, 0, r, r) = I;
  iqc.d_z.block(2 * r, 0, r, r) = -I;
  iqc.d_z.block(3 * r, 0, r, r) = I;

  iqc.q = MatrixXd::Zero(6 * r, 6 * r);
  iqc.q.block(0, 0, 2 * r, 2 * r) = q_off(mult.mu, mult.mu);
  iqc.q.block(2 * r, 2 * r, 2 * r, 2 * r) = q_off(mult.eta0, mult.eta0);
  iqc.q.block(2 * r, 4 * r, 2 * r, 2 * r) = q_off(mult.eta_upper, mult.eta_lower);
  iqc.q.block(4 * r, 2 * r, 2 * r, 2 * r) = q_off(mult.eta_lower, mult.eta_upper);
  return iqc;
}

AugmentedSystem build_augmented(const MatrixXd& a, const MatrixXd& b,
                                const grnn::StackedBlocks& blocks, const MatrixXd& shift,
                                std::size_t state_dim, const SectorSlopeBounds& bounds) {
  const Index nx = a.rows();
  const Index r = blocks.k1.rows();
  if (a.cols() != nx || b.rows() != nx || blocks.k4.rows() != b.cols() ||
      blocks.k4.cols() != r || blocks.k2.cols() != nx || blocks.k3.cols() != nx ||
      blocks.k2.rows() != r || idx(bounds.size()) != r)
    throw InvalidArgument("build_augmented: dimension mismatch");
  const MatrixXd F = grnn::state_feedback_map(blocks, shift, state_dim);
  const Index nxi = nx + 2 * r;

  AugmentedSystem aug;
  aug.layout = {0, static_cast<std::size_t>(nx), static_cast<std::size_t>(nx + r),
                static_cast<std::size_t>(nx), static_cast<std::size_t>(r)};
  aug.bounds = bounds;
  aug.a = MatrixXd::Zero(nxi, nxi);
  aug.a.block(0, 0, nx, nx) = a;
  aug.a.block(nx, 0, r, nx) = F;
  aug.a.block(nx, nx + r, r, r) = blocks.k1;
  aug.b = MatrixXd::Zero(nxi, 2 * r);
  aug.b.block(0, r, nx, r) = b * blocks.k4;
  aug.b.block(nx + r, r, r, r) = MatrixXd::Identity(r, r);
  aug.c = MatrixXd::Zero(6 * r, nxi);
  aug.c.block(4 * r, nx, r, r) = (-bounds.slope_upper).asDiagonal();
  aug.c.block(4 * r, nx + r, r, r) = MatrixXd::Identity(r, r);
  aug.c.block(5 * r, nx, r, r) = bounds.slope_lower.asDiagonal();
  aug.c.block(5 * r, nx + r, r, r) = -MatrixXd::Identity(r, r);
  // D rows match the sector and slope rows of the IQC output.
  IqcRealization shape = build_iqc(bounds, IqcMultipliers::uniform(bounds.size(), 0, 0, 0, 0));
  aug.d = MatrixXd::Zero(6 * r, 2 * r);
  aug.d.leftCols(r) = shape.d_h;
  aug.d.rightCols(r) = shape.d_z;
  aug.h_map = MatrixXd::Zero(r, nxi);
  aug.h_map.leftCols(nx) = F;
  aug.h_map.block(0, nx + r, r, r) = blocks.k1;
  return aug;
}

AugmentedSystem build_augmented(const plant::NetworkedSystem& sys,
                                std::span<const grnn::NodeWeights> weights,
                                const MatrixXd& shift, const SectorSlopeBounds& bounds) {
  if (weights.size() != sys.nodes()) throw InvalidArgument("build_augmented: one weight per node");
  return build_augmented(sys.a(), sys.b(), grnn::stacked_weight_blocks(weights), shift,
                         sys.state_dim(), bounds);
}

AugmentedTrajectory simulate_augmented(const AugmentedSystem& aug, const grnn::Activation& act,
                                       const VectorXd& x0, std::size_t steps) {
  const Index nx = idx(aug.layout.x_size);
  const Index r = idx(aug.layout.hidden_size);
  if (x0.size() != nx) throw InvalidArgument("simulate_augmented: x0 size mismatch");
  AugmentedTrajectory traj;
  VectorXd xi = VectorXd::Zero(nx + 2 * r);
  xi.head(nx) = x0;
  traj.xi.push_back(xi);
  VectorXd hz(2 * r);
  for (std::size_t t = 0; t < steps; ++t) {
    const VectorXd h = aug.h_map * xi;
    VectorXd z(r);
    for (Index k = 0; k < r; ++k) z(k) = act(h(k));
    hz << h, z;
    traj.q.push_back(aug.c * xi + aug.d * hz);
    xi = aug.a * xi + aug.b * hz;
    traj.h.push_back(h);
    traj.z.push_back(z);
    traj.xi.push_back(xi);
  }
  return traj;
}

MatrixXd dlyap(const MatrixXd& a, const MatrixXd& w) {
  if (a.rows() != a.cols() || w.rows() != a.rows() || w.cols() != a.cols())
    throw InvalidArgument("dlyap: dimension mismatch");
  if (a.size() == 0) return w;
  const double rho = graph::spectral_radius(a);
  if (!(rho < 1.0)) {
    std::ostringstream msg;
    msg << "dlyap: matrix is not Schur stable (spectral radius " << rho << ")";
    throw NumericalFailure(msg.str());
  }
  MatrixXd p = w;
  MatrixXd ak = a;
  for (int it = 0; it < 80; ++it) {
    const MatrixXd inc = ak.transpose() * p * ak;
    p += inc;
    ak = ak * ak;
    if (inc.norm() <= 1e-17 * p.norm()) break;
  }
  return symmetrize(p);
}

std::string to_string(Verdict v) { return v == Verdict::certified ? "certified" : "not_certified"; }
std::string to_string(LmiForm f) { return f == LmiForm::consistent ? "consistent" : "literal"; }
LmiForm parse_lmi_form(const std::string& text) {
  if (text == "consistent") return LmiForm::consistent;
  if (text == "literal") return LmiForm::literal;
  throw InvalidArgument("unknown LMI form: " + text);
}

MatrixXd StabilityCertificate::p_x() const {
  const Index nx = idx(bounds.size() == 0 ? static_cast<std::size_t>(p.rows())
                                          : static_cast<std::size_t>(p.rows()) - 2 * bounds.size());
  return p.topLeftCorner(nx, nx);
}

double StabilityCertificate::ellipsoid_level() const { return std::min(1.0, roa_level); }

namespace {

// T maps [xi; z] to [xi; H xi; z].
MatrixXd consistent_map(const AugmentedSystem& aug) {
  const Index nxi = idx(aug.layout.size());
  const Index r = idx(aug.layout.hidden_size);
  MatrixXd t = MatrixXd::Zero(nxi + 2 * r, nxi + r);
  t.topLeftCorner(nxi, nxi).setIdentity();
  t.block(nxi, 0, r, nxi) = aug.h_map;
  t.bottomRightCorner(r, r).setIdentity();
  return t;
}

MatrixXd literal_lmi(const AugmentedSystem& aug, const MatrixXd& q, const MatrixXd& p,
                     double epsilon) {
  const Index nxi = idx(aug.layout.size());
  const Index nx = idx(aug.layout.x_size);
  const Index r2 = aug.b.cols();
  MatrixXd g(nxi, nxi + r2);
  g << aug.a, aug.b;
  MatrixXd l(aug.c.rows(), nxi + r2);
  l << aug.c, aug.d;
  MatrixXd m = g.transpose() * p * g + l.transpose() * q * l;
  m.topLeftCorner(nxi, nxi) -= p;
  m.diagonal().head(nx).array() += epsilon;
  return m;
}

}  // namespace

MatrixXd lmi_matrix(const AugmentedSystem& aug, const MatrixXd& q, const MatrixXd& p,
                    double epsilon, LmiForm form) {
  const Index nxi = idx(aug.layout.size());
  if (p.rows() != nxi || p.cols() != nxi) throw InvalidArgument("P has the wrong size");
  if (q.rows() != aug.c.rows() || q.cols() != aug.c.rows())
    throw InvalidArgument("Q has the wrong size");
  MatrixXd m = literal_lmi(aug, q, symmetrize(p), epsilon);
  if (form == LmiForm::consistent) {
    const MatrixXd t = consistent_map(aug);
    m = t.transpose() * m * t;
  }
  return symmetrize(m);
}

StabilityCertificate check_certificate(const AugmentedSystem& aug, const IqcMultipliers& mult,
                                       const MatrixXd& p, double epsilon, LmiForm form) {
  if (!(epsilon > 0.0)) throw InvalidArgument("epsilon must be strictly positive");
  const Index nxi = idx(aug.layout.size());
  if (p.rows() != nxi || p.cols() != nxi) throw InvalidArgument("P has the wrong size");
  if (!p.allFinite()) throw InvalidArgument("P has non-finite entries");
  const double pnorm = p.cwiseAbs().maxCoeff();
  if ((p - p.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, pnorm))
    throw InvalidArgument("P must be symmetric");
  const IqcRealization iqc = build_iqc(aug.bounds, mult);

  StabilityCertificate cert;
  cert.form = form;
  cert.p = symmetrize(p);
  cert.epsilon = epsilon;
  cert.multipliers = mult;
  cert.bounds = aug.bounds;
  const auto peig = eig(cert.p, false).eigenvalues();
  cert.p_min_eig = peig.minCoeff();
  const double scale = std::max(1.0, peig.cwiseAbs().maxCoeff());
  cert.tolerance = 1e-9 * scale;
  cert.max_eig = max_eig(lmi_matrix(aug, iqc.q, cert.p, epsilon, form));
  const bool ok = cert.max_eig <= cert.tolerance && cert.p_min_eig > cert.tolerance;
  cert.verdict = ok ? Verdict::certified : Verdict::not_certified;
  if (!(cert.p_min_eig > cert.tolerance)) cert.notes.push_back("P is not positive definite");
  if (!(cert.max_eig <= cert.tolerance)) cert.notes.push_back("block inequality violated");

  cert.roa_level = kInf;
  if (ok) {
    const MatrixXd pinv = cert.p.inverse();
    for (Index k = 0; k < aug.h_map.rows(); ++k) {
      const double spread = aug.h_map.row(k) * pinv * aug.h_map.row(k).transpose();
      if (spread <= 0.0) continue;
      const double bound = std::min(-aug.bounds.input.lower(k), aug.bounds.input.upper(k));
      cert.roa_level = std::min(cert.roa_level, bound * bound / spread);
    }
    std::ostringstream note;
    note << "local certificate: valid for x(0)' P_x x(0) <= "
         << io::format_double(cert.ellipsoid_level()) << " with hidden states in the input box";
    cert.notes.push_back(note.str());
  }
  return cert;
}

namespace {

struct Candidate {
  MatrixXd p;
  VectorXd mu, eta_lower, eta_upper, gamma;  // eta0 = eta_lower + eta_upper + gamma
};

IqcMultipliers to_multipliers(const Candidate& c) {
  return {c.mu, c.eta_lower + c.eta_upper + c.gamma, c.eta_lower, c.eta_upper};
}

struct Evaluation {
  double value = kInf;
  MatrixXd y;  // smoothed top eigenprojector
};

Evaluation evaluate(const AugmentedSystem& aug, const Candidate& c, double epsilon, LmiForm form,
                    double temperature) {
  const IqcRealization iqc = build_iqc(aug.bounds, to_multipliers(c));
  const MatrixXd m = lmi_matrix(aug, iqc.q, c.p, epsilon, form);
  const auto es = eig(m, true);
  const VectorXd& lam = es.eigenvalues();
  Evaluation ev;
  ev.value = lam.maxCoeff();
  VectorXd w = ((lam.array() - ev.value) / temperature).exp();
  w /= w.sum();
  ev.y = es.eigenvectors() * w.asDiagonal() * es.eigenvectors().transpose();
  return ev;
}

void project(Candidate& c, double p_floor) {
  const auto es = eig(c.p, true);
  VectorXd lam = es.eigenvalues().cwiseMax(p_floor);
  c.p = symmetrize(es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose());
  c.mu = c.mu.cwiseMax(0.0);
  c.eta_lower = c.eta_lower.cwiseMax(0.0);
  c.eta_upper = c.eta_upper.cwiseMax(0.0);
  c.gamma = c.gamma.cwiseMax(0.0);
}

// Gradient of <Y, M(P, Q)> with respect to the candidate variables.
Candidate gradient(const AugmentedSystem& aug, const MatrixXd& y, LmiForm form) {
  const Index nxi = idx(aug.layout.size());
  const Index r = idx(aug.layout.hidden_size);
  MatrixXd yl = y;
  if (form == LmiForm::consistent) {
    const MatrixXd t = consistent_map(aug);
    yl = t * y * t.transpose();
  }
  MatrixXd g(nxi, nxi + 2 * r);
  g << aug.a, aug.b;
  MatrixXd l(aug.c.rows(), nxi + 2 * r);
  l << aug.c, aug.d;
  Candidate grad;
  grad.p = symmetrize(g * yl * g.transpose() - yl.topLeftCorner(nxi, nxi));
  const MatrixXd f = l * yl * l.transpose();
  grad.mu.resize(r);
  grad.eta_lower.resize(r);
  grad.eta_upper.resize(r);
  grad.gamma.resize(r);
  for (Index k = 0; k < r; ++k) {
    const double d0 = 2.0 * f(2 * r + k, 3 * r + k);
    grad.mu(k) = 2.0 * f(k, r + k);
    grad.gamma(k) = d0;
    grad.eta_upper(k) = 2.0 * f(2 * r + k, 5 * r + k) + d0;
    grad.eta_lower(k) = 2.0 * f(3 * r + k, 4 * r + k) + d0;
  }
  return grad;
}

double candidate_norm(const Candidate& g) {
  return std::sqrt(g.p.squaredNorm() + g.mu.squaredNorm() + g.eta_lower.squaredNorm() +
                   g.eta_upper.squaredNorm() + g.gamma.squaredNorm());
}

Candidate axpy(const Candidate& x, double a, const Candidate& d) {
  return {x.p + a * d.p, x.mu + a * d.mu, x.eta_lower + a * d.eta_lower,
          x.eta_upper + a * d.eta_upper, x.gamma + a * d.gamma};
}

double p_scale(const MatrixXd& p) { return std::max(1.0, eig(p, false).eigenvalues().cwiseAbs().maxCoeff()); }

struct Refined {
  Candidate best;
  double value = kInf;      // raw largest eigenvalue
  double relative = kInf;   // value / max(1, |P|)
};

Refined refine(const AugmentedSystem& aug, Candidate c, const SearchBudget& budget) {
  constexpr double p_floor = 1.0;
  project(c, p_floor);
  double scale = p_scale(c.p);
  Evaluation ev = evaluate(aug, c, budget.epsilon, budget.form, 1e-3 * scale);
  double step = 0.05 * scale;
  for (int it = 0; it < budget.iterations; ++it) {
    if (ev.value < -1e-7 * scale) break;
    Candidate g = gradient(aug, ev.y, budget.form);
    const double gn = candidate_norm(g);
    if (!(gn > 0.0)) break;
    bool accepted = false;
    for (int tries = 0; tries < 12; ++tries) {
      Candidate trial = axpy(c, -step / gn, g);
      project(trial, p_floor);
      const double tscale = p_scale(trial.p);
      Evaluation tev = evaluate(aug, trial, budget.epsilon, budget.form, 1e-3 * tscale);
      if (tev.value / tscale < ev.value / scale) {
        c = std::move(trial);
        ev = std::move(tev);
        scale = tscale;
        step *= 1.5;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  return {c, ev.value, ev.value / scale};
}

}  // namespace

StabilityCertificate search_certificate(const AugmentedSystem& aug, const SearchBudget& budget) {
  if (!(budget.epsilon > 0.0)) throw InvalidArgument("epsilon must be strictly positive");
  const Index nxi = idx(aug.layout.size());
  const Index r = idx(aug.layout.hidden_size);
  const VectorXd g = 0.5 * (aug.bounds.slope_lower + aug.bounds.slope_upper);
  const MatrixXd a_lin = aug.a + aug.b.rightCols(r) * g.asDiagonal() * aug.h_map;
  const double rho = graph::spectral_radius(a_lin);
  if (!(rho < 1.0)) {
    StabilityCertificate cert;
    cert.form = budget.form;
    cert.epsilon = budget.epsilon;
    cert.bounds = aug.bounds;
    cert.multipliers = IqcMultipliers::uniform(aug.bounds.size(), 0, 0, 0, 0);
    cert.max_eig = kInf;
    cert.p_min_eig = 0.0;
    std::ostringstream note;
    note << "linearised closed loop is not Schur stable (spectral radius "
         << io::format_double(rho) << "); search skipped";
    cert.notes.push_back(note.str());
    return cert;
  }
  MatrixXd p0 = dlyap(a_lin, MatrixXd::Identity(nxi, nxi));
  p0 /= min_eig(p0);

  std::vector<Candidate> seeds;
  for (double ps : {1.0, 10.0, 100.0})
    for (double ms : {0.5, 2.0, 8.0})
      for (double slope_share : {0.0, 0.5}) {
        Candidate c;
        c.p = ps * p0;
        const double mu = ms * ps * (1.0 - slope_share);
        const double eta = ms * ps * slope_share;
        c.mu = VectorXd::Constant(r, mu);
        c.eta_lower = VectorXd::Constant(r, 0.25 * eta);
        c.eta_upper = VectorXd::Constant(r, 0.25 * eta);
        c.gamma = VectorXd::Constant(r, 0.5 * eta);
        seeds.push_back(std::move(c));
      }

  std::vector<Refined> results(seeds.size());
  parallel_for(seeds.size(), budget.threads,
               [&](std::size_t k) { results[k] = refine(aug, seeds[k], budget); });
  std::size_t best = 0;
  for (std::size_t k = 1; k < results.size(); ++k)
    if (results[k].relative < results[best].relative) best = k;

  StabilityCertificate cert = check_certificate(aug, to_multipliers(results[best].best),
                                                results[best].best.p, budget.epsilon, budget.form);
  std::ostringstream note;
  note << "search: best of " << seeds.size() << " candidates (#" << best
       << "), linearised spectral radius " << io::format_double(rho);
  cert.notes.push_back(note.str());
  if (!cert.certified()) cert.notes.push_back("budget exhausted without a certificate");
  return cert;
}

nlohmann::json to_json(const StabilityCertificate& cert) {
  auto vec = [](const VectorXd& v) {
    nlohmann::json a = nlohmann::json::array();
    for (Index k = 0; k < v.size(); ++k) a.push_back(v(k));
    return a;
  };
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
  };
  nlohmann::json doc;
  doc["verdict"] = to_string(cert.verdict);
  doc["form"] = to_string(cert.form);
  doc["epsilon"] = cert.epsilon;
  doc["max_eig"] = num(cert.max_eig);
  doc["p_min_eig"] = num(cert.p_min_eig);
  doc["tolerance"] = cert.tolerance;
  doc["roa_level"] = num(cert.roa_level);
  doc["multipliers"] = {{"mu", vec(cert.multipliers.mu)},
                        {"eta0", vec(cert.multipliers.eta0)},
                        {"eta_lower", vec(cert.multipliers.eta_lower)},
                        {"eta_upper", vec(cert.multipliers.eta_upper)}};
  doc["box"] = {{"lower", vec(cert.bounds.input.lower)},
                {"upper", vec(cert.bounds.input.upper)},
                {"sector_lower", vec(cert.bounds.sector_lower)},
                {"sector_upper", vec(cert.bounds.sector_upper)},
                {"slope_lower", vec(cert.bounds.slope_lower)},
                {"slope_upper", vec(cert.bounds.slope_upper)}};
  doc["p"] = {{"rows", cert.p.rows()}, {"values", io::matrix_to_json(cert.p)}};
  doc["notes"] = cert.notes;
  return doc;
}

}  // namespace netgrnn::stability
