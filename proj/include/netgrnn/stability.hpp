#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "netgrnn/grnn.hpp"
#include "netgrnn/plant.hpp"

namespace netgrnn::stability {

/// Element-wise interval [lower, upper].
struct Box {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  static Box symmetric(std::size_t size, double radius);
  static Box point(const Eigen::VectorXd& v);
  std::size_t size() const { return static_cast<std::size_t>(lower.size()); }
  bool contains(const Eigen::VectorXd& v, double tol = 0.0) const;
  bool contains(const Box& inner, double tol = 0.0) const;
  bool contains_zero() const;
  void validate() const;
};

/// Interval image of M * [box].
Box interval_product(const Eigen::MatrixXd& m, const Box& box);
Box interval_sum(const Box& a, const Box& b);

/// Local sector [alpha_lo, alpha_hi] and slope [sigma_lo, sigma_hi] bounds
/// valid on the input box.
struct SectorSlopeBounds {
  Box input;
  Eigen::VectorXd sector_lower;
  Eigen::VectorXd sector_upper;
  Eigen::VectorXd slope_lower;
  Eigen::VectorXd slope_upper;

  std::size_t size() const { return input.size(); }
};

/// tanh: sector [min(tanh(b)/b), 1], slope [tanh'(max|b|), 1]; leaky_relu(a)
/// and relu: [a, 1] for both. Sigmoid and boxes without 0 are rejected.
SectorSlopeBounds activation_bounds(const grnn::Activation& activation, const Box& h_box);

/// Range of the activation over R (infinite ends for unbounded kinds).
Box activation_range(const grnn::Activation& activation, std::size_t size);
/// Monotone interval image sigma([box]).
Box activation_image(const grnn::Activation& activation, const Box& h_box);

/// One interval pass of h = K1 z + F x with F = K2 + K3 (S kron I).
Box input_box(const Eigen::MatrixXd& k1, const Eigen::MatrixXd& state_map, const Box& x_box,
              const Box& z_box);
Box input_box(const grnn::StackedBlocks& blocks, const Eigen::MatrixXd& shift,
              std::size_t state_dim, const Box& x_box, const Box& z_box);

struct InvariantBox {
  Box h;
  Box z;
  int iterations = 0;
  bool converged = false;
};

/// Fixed point of z <- sigma(K1 z + F x) over the x box. Bounded activations
/// start from their range (each iterate is valid); unbounded ones start from
/// {0} and either converge or get one widening attempt before failing.
InvariantBox invariant_input_box(const Eigen::MatrixXd& k1, const Eigen::MatrixXd& state_map,
                                 const Box& x_box, const grnn::Activation& activation,
                                 int max_iterations = 50);

/// mu: sector multipliers; eta0, eta_lower, eta_upper: slope multipliers with
/// eta0 >= eta_lower + eta_upper. All of length pN.
struct IqcMultipliers {
  Eigen::VectorXd mu;
  Eigen::VectorXd eta0;
  Eigen::VectorXd eta_lower;
  Eigen::VectorXd eta_upper;

  static IqcMultipliers uniform(std::size_t size, double mu, double eta0, double eta_lower,
                                double eta_upper);
  std::size_t size() const { return static_cast<std::size_t>(mu.size()); }
  void validate(std::size_t size) const;
};

/// Q_off(a, b) = [[0, diag a], [diag b, 0]].
Eigen::MatrixXd q_off(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

/// psi(t+1) = B_h h(t) + B_z z(t), q(t) = C psi(t) + D_h h(t) + D_z z(t), and Q.
/// q has 6r rows: sector (2r), slope (2r), psi passthrough (2r).
struct IqcRealization {
  Eigen::MatrixXd a;    // 2r x 2r, zero
  Eigen::MatrixXd b_h;  // 2r x r
  Eigen::MatrixXd b_z;  // 2r x r
  Eigen::MatrixXd c;    // 6r x 2r
  Eigen::MatrixXd d_h;  // 6r x r
  Eigen::MatrixXd d_z;  // 6r x r
  Eigen::MatrixXd q;    // 6r x 6r

  Eigen::VectorXd output(const Eigen::VectorXd& psi, const Eigen::VectorXd& h,
                         const Eigen::VectorXd& z) const;
  Eigen::VectorXd next_state(const Eigen::VectorXd& h, const Eigen::VectorXd& z) const;
};

IqcRealization build_iqc(const SectorSlopeBounds& bounds, const IqcMultipliers& multipliers);

/// Offsets of the x, h(t-1), z(t-1) blocks of xi.
struct XiLayout {
  std::size_t x_offset = 0;
  std::size_t h_offset = 0;
  std::size_t z_offset = 0;
  std::size_t x_size = 0;
  std::size_t hidden_size = 0;
  std::size_t size() const { return x_size + 2 * hidden_size; }
};

/// xi(t+1) = A xi + B [h; z], q = C xi + D [h; z], with h(t) = H xi(t).
struct AugmentedSystem {
  Eigen::MatrixXd a;      // A_Xi
  Eigen::MatrixXd b;      // B_Xi
  Eigen::MatrixXd c;      // C_Xi
  Eigen::MatrixXd d;      // D_Xi
  Eigen::MatrixXd h_map;  // H = [K2 + K3 S, 0, K1]
  XiLayout layout;
  SectorSlopeBounds bounds;
};

AugmentedSystem build_augmented(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                                const grnn::StackedBlocks& blocks, const Eigen::MatrixXd& shift,
                                std::size_t state_dim, const SectorSlopeBounds& bounds);
AugmentedSystem build_augmented(const plant::NetworkedSystem& sys,
                                std::span<const grnn::NodeWeights> weights,
                                const Eigen::MatrixXd& shift, const SectorSlopeBounds& bounds);

/// Noise-free closed loop in xi coordinates from xi(0) = [x0; 0; 0].
struct AugmentedTrajectory {
  std::vector<Eigen::VectorXd> xi;  // steps + 1
  std::vector<Eigen::VectorXd> h;   // steps
  std::vector<Eigen::VectorXd> z;   // steps
  std::vector<Eigen::VectorXd> q;   // steps
};
AugmentedTrajectory simulate_augmented(const AugmentedSystem& aug,
                                       const grnn::Activation& activation,
                                       const Eigen::VectorXd& x0, std::size_t steps);

/// Solution of A' P A - P = -W by squaring (requires rho(A) < 1).
Eigen::MatrixXd dlyap(const Eigen::MatrixXd& a, const Eigen::MatrixXd& w);

enum class Verdict { certified, not_certified };
/// literal: h and z free in the block inequality; consistent: h tied to H xi
/// (the closed loop always satisfies h(t) = H xi(t)).
enum class LmiForm { consistent, literal };

std::string to_string(Verdict v);
std::string to_string(LmiForm f);
LmiForm parse_lmi_form(const std::string& text);

struct StabilityCertificate {
  Verdict verdict = Verdict::not_certified;
  LmiForm form = LmiForm::consistent;
  Eigen::MatrixXd p;
  double epsilon = 0.0;
  IqcMultipliers multipliers;
  SectorSlopeBounds bounds;
  double max_eig = 0.0;
  double p_min_eig = 0.0;
  double tolerance = 0.0;
  /// Largest c with {xi' P xi <= c} mapped into the h box; inf without feedback.
  double roa_level = 0.0;
  std::vector<std::string> notes;

  bool certified() const { return verdict == Verdict::certified; }
  /// P restricted to the x block.
  Eigen::MatrixXd p_x() const;
  /// Level of the certified initial-state ellipsoid {x' P_x x <= level}.
  double ellipsoid_level() const;
};

/// The block matrix of the certificate plus diag(eps I_x, 0), symmetrised.
Eigen::MatrixXd lmi_matrix(const AugmentedSystem& aug, const Eigen::MatrixXd& q,
                           const Eigen::MatrixXd& p, double epsilon, LmiForm form);

StabilityCertificate check_certificate(const AugmentedSystem& aug,
                                       const IqcMultipliers& multipliers, const Eigen::MatrixXd& p,
                                       double epsilon, LmiForm form = LmiForm::consistent);

struct SearchBudget {
  int iterations = 300;  // refinement steps per candidate
  double epsilon = 1e-4;
  std::size_t threads = 1;
  LmiForm form = LmiForm::consistent;
};

/// Heuristic search: Lyapunov seed from the slope-midpoint linearisation, a
/// grid of uniform multiplier scalings and P scalings, then projected
/// gradient refinement of the smoothed largest eigenvalue.
StabilityCertificate search_certificate(const AugmentedSystem& aug, const SearchBudget& budget);

nlohmann::json to_json(const StabilityCertificate& cert);

}  // namespace netgrnn::stability
