#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "netgrnn/graph.hpp"
#include "netgrnn/grnn.hpp"
#include "netgrnn/plant.hpp"
#include "netgrnn/stability.hpp"
#include "netgrnn/training.hpp"

namespace netgrnn::experiment {

/// Flat, typed experiment settings. Defaults reproduce the reference setup.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  // topology
  std::size_t nodes = 10;
  std::size_t clusters = 3;
  double p_in = 0.8;
  double p_out = 0.1;
  // plant
  std::size_t state_dim = 2;
  std::size_t input_dim = 2;
  double scale = 0.995;
  double noise_std = 0.1;
  // controller
  std::size_t hidden_dim = 2;
  std::string activation = "tanh";
  std::string shift = "normalized_adjacency";
  double weight_low = 0.0;
  double weight_high = 1.0;
  // training
  std::size_t epochs = 21;
  std::size_t batch = 100;
  std::size_t test_samples = 20;
  std::size_t horizon = 10;
  double learning_rate = 0.01;
  double lr_decay = 50.0;
  std::string window = "continuing";
  std::string gradient = "frozen";
  double init_mean = 2.0;
  double init_std = 1.0;
  bool test_noise = true;
  double divergence_threshold = 1e6;
  bool distributed = false;  // run training through the message-passing harness
  // loss weights (P = R = P_T multiples of I)
  double state_weight = 1.0;
  double input_weight = 1.0;
  double terminal_weight = 1.0;
  // evaluation
  std::size_t eval_samples = 20;
  std::size_t compare_steps = 50;
  // stability
  double state_box = 3.0;
  int search_iterations = 300;
  double certify_epsilon = 1e-4;
  std::string lmi_form = "consistent";
  // scaling
  std::string scaling_nodes = "10,20,40,80";
  std::size_t scaling_epochs = 5;
  std::size_t scaling_cluster_size = 5;
  double scaling_inter_edges = 1.0;  // expected inter-cluster edges per node
  std::size_t scaling_max_degree = 8;  // graphs above this are redrawn with a new seed
  // runtime
  std::size_t threads = 0;
  bool log_messages = false;

  /// Canonical `key = value` text (stable order), also the hash input.
  std::string to_text() const;
  std::uint64_t hash() const;
  void validate() const;

  training::GradientMode gradient_mode() const;
  training::WindowMode window_mode() const;
  grnn::Activation activation_fn() const;
  std::vector<std::size_t> scaling_node_list() const;
};

/// Applies one `key = value` assignment; unknown keys and bad values throw.
void set_value(ExperimentConfig& config, const std::string& key, const std::string& value);
/// Parses `key = value` lines (# comments, blank lines allowed) over `base`.
ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base = {});

struct Setup {
  graph::Topology topology;
  plant::NetworkedSystem system;
};

Setup generate(const ExperimentConfig& config);
training::TrainingProblem make_problem(const ExperimentConfig& config, const Setup& setup);

/// Noise-free costs on evaluation draws, each completed with x(T)' P_inf x(T).
struct Evaluation {
  std::vector<double> grnn_cost;
  std::vector<double> lqr_cost;
  std::vector<double> open_loop_cost;
  std::vector<double> lqr_bound;  // x0' P_inf x0
};

/// Per-time averages of per-node norms, noise on, common random numbers.
struct Comparison {
  std::vector<double> avg_state_grnn;  // steps + 1
  std::vector<double> avg_state_lqr;
  std::vector<double> avg_ctrl_grnn;   // steps
  std::vector<double> avg_ctrl_lqr;
};

plant::LqrSolution solve_reference_lqr(const ExperimentConfig& config,
                                       const plant::NetworkedSystem& sys);
Evaluation evaluate(const ExperimentConfig& config, const Setup& setup,
                    std::span<const grnn::NodeWeights> weights);
Comparison compare_lqr(const ExperimentConfig& config, const Setup& setup,
                       std::span<const grnn::NodeWeights> weights);

struct CertifyResult {
  stability::InvariantBox box;
  stability::StabilityCertificate certificate;
  std::map<std::string, double> seconds;  // phase timings
};
CertifyResult certify(const ExperimentConfig& config, const Setup& setup,
                      std::span<const grnn::NodeWeights> weights);

struct ScalingRow {
  std::size_t nodes;
  std::size_t edges;
  std::size_t max_degree;
  double epoch_seconds;
  double per_node_epoch_seconds;
};
struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};
std::vector<ScalingRow> scaling(const ExperimentConfig& config);
LinearFit fit_line(std::span<const double> x, std::span<const double> y);

// Artifact helpers used by the CLI.
void write_setup(const std::filesystem::path& dir, const ExperimentConfig& config,
                 const Setup& setup);
Setup read_setup(const std::filesystem::path& dir);
void write_config_echo(const std::filesystem::path& dir, const ExperimentConfig& config);
nlohmann::json stamp(const ExperimentConfig& config, nlohmann::json doc);

}  // namespace netgrnn::experiment
