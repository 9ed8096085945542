#include "netgrnn/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "netgrnn/errors.hpp"
#include "netgrnn/io.hpp"

namespace netgrnn::experiment {

namespace {
using Eigen::Index;
Index idx(std::size_t v) { return static_cast<Index>(v); }

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw InvalidArgument("config key '" + key + "' expects a nonnegative integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw InvalidArgument("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw InvalidArgument("config key '" + key + "' expects true/false, got '" + v + "'");
}

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define NG_SIZE(name)                                                                   \
  Field{#name, [](ExperimentConfig& c, const std::string& v) {                          \
          c.name = static_cast<decltype(c.name)>(to_u64(#name, v));                      \
        },                                                                              \
        [](const ExperimentConfig& c) { return std::to_string(c.name); }}
#define NG_INT(name)                                                                    \
  Field{#name, [](ExperimentConfig& c, const std::string& v) {                          \
          c.name = static_cast<int>(to_u64(#name, v));                                  \
        },                                                                              \
        [](const ExperimentConfig& c) { return std::to_string(c.name); }}
#define NG_DOUBLE(name)                                                                 \
  Field{#name, [](ExperimentConfig& c, const std::string& v) { c.name = to_double(#name, v); }, \
        [](const ExperimentConfig& c) { return io::format_double(c.name); }}
#define NG_BOOL(name)                                                                   \
  Field{#name, [](ExperimentConfig& c, const std::string& v) { c.name = to_bool(#name, v); }, \
        [](const ExperimentConfig& c) { return std::string(c.name ? "true" : "false"); }}
#define NG_STRING(name)                                                                 \
  Field{#name, [](ExperimentConfig& c, const std::string& v) { c.name = v; },           \
        [](const ExperimentConfig& c) { return c.name; }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      NG_SIZE(seed),
      NG_SIZE(nodes),
      NG_SIZE(clusters),
      NG_DOUBLE(p_in),
      NG_DOUBLE(p_out),
      NG_SIZE(state_dim),
      NG_SIZE(input_dim),
      NG_DOUBLE(scale),
      NG_DOUBLE(noise_std),
      NG_SIZE(hidden_dim),
      NG_STRING(activation),
      NG_STRING(shift),
      NG_DOUBLE(weight_low),
      NG_DOUBLE(weight_high),
      NG_SIZE(epochs),
      NG_SIZE(batch),
      NG_SIZE(test_samples),
      NG_SIZE(horizon),
      NG_DOUBLE(learning_rate),
      NG_DOUBLE(lr_decay),
      NG_STRING(window),
      NG_STRING(gradient),
      NG_DOUBLE(init_mean),
      NG_DOUBLE(init_std),
      NG_BOOL(test_noise),
      NG_DOUBLE(divergence_threshold),
      NG_BOOL(distributed),
      NG_DOUBLE(state_weight),
      NG_DOUBLE(input_weight),
      NG_DOUBLE(terminal_weight),
      NG_SIZE(eval_samples),
      NG_SIZE(compare_steps),
      NG_DOUBLE(state_box),
      NG_INT(search_iterations),
      NG_DOUBLE(certify_epsilon),
      NG_STRING(lmi_form),
      NG_STRING(scaling_nodes),
      NG_SIZE(scaling_epochs),
      NG_SIZE(scaling_cluster_size),
      NG_DOUBLE(scaling_inter_edges),
      NG_SIZE(scaling_max_degree),
      NG_SIZE(threads),
      NG_BOOL(log_messages),
  };
  return table;
}

#undef NG_SIZE
#undef NG_INT
#undef NG_DOUBLE
#undef NG_BOOL
#undef NG_STRING

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Eigen::MatrixXd scaled_identity(std::size_t size, double c) {
  return c * Eigen::MatrixXd::Identity(idx(size), idx(size));
}

double node_norm_mean(const Eigen::VectorXd& v, std::size_t nodes, std::size_t dim) {
  double s = 0.0;
  for (std::size_t i = 0; i < nodes; ++i) s += v.segment(idx(i * dim), idx(dim)).norm();
  return s / static_cast<double>(nodes);
}

}  // namespace

std::string ExperimentConfig::to_text() const {
  std::ostringstream out;
  for (const auto& f : fields()) out << f.key << " = " << f.get(*this) << '\n';
  return out.str();
}

std::uint64_t ExperimentConfig::hash() const { return io::fnv1a(to_text()); }

void ExperimentConfig::validate() const {
  if (nodes == 0) throw InvalidArgument("nodes must be >= 1");
  if (clusters == 0 || clusters > nodes) throw InvalidArgument("clusters must be in [1, nodes]");
  if (!(p_in >= 0.0 && p_in <= 1.0) || !(p_out >= 0.0 && p_out <= 1.0))
    throw InvalidArgument("edge probabilities must be in [0, 1]");
  if (state_dim == 0 || input_dim == 0 || hidden_dim == 0)
    throw InvalidArgument("dimensions must be >= 1");
  if (!(scale > 0.0)) throw InvalidArgument("scale must be > 0");
  if (!(noise_std >= 0.0)) throw InvalidArgument("noise_std must be >= 0");
  if (!(weight_low <= weight_high)) throw InvalidArgument("weight_low must be <= weight_high");
  if (batch == 0 || test_samples == 0 || horizon == 0)
    throw InvalidArgument("batch, test_samples and horizon must be >= 1");
  if (!(learning_rate > 0.0) || !(lr_decay > 0.0))
    throw InvalidArgument("learning_rate and lr_decay must be > 0");
  if (!(init_std >= 0.0)) throw InvalidArgument("init_std must be >= 0");
  if (!(state_weight >= 0.0) || !(input_weight > 0.0) || !(terminal_weight >= 0.0))
    throw InvalidArgument("loss weights must be nonnegative (input weight positive)");
  if (eval_samples == 0 || compare_steps == 0)
    throw InvalidArgument("eval_samples and compare_steps must be >= 1");
  if (!(state_box > 0.0)) throw InvalidArgument("state_box must be > 0");
  if (!(certify_epsilon > 0.0)) throw InvalidArgument("certify_epsilon must be > 0");
  if (scaling_cluster_size == 0) throw InvalidArgument("scaling_cluster_size must be >= 1");
  if (scaling_max_degree == 0) throw InvalidArgument("scaling_max_degree must be >= 1");
  (void)gradient_mode();
  (void)window_mode();
  (void)activation_fn();
  (void)graph::parse_shift_kind(shift);
  (void)stability::parse_lmi_form(lmi_form);
  (void)scaling_node_list();
}

training::GradientMode ExperimentConfig::gradient_mode() const {
  return training::parse_gradient_mode(gradient);
}
training::WindowMode ExperimentConfig::window_mode() const {
  return training::parse_window_mode(window);
}
grnn::Activation ExperimentConfig::activation_fn() const { return grnn::Activation::parse(activation); }

std::vector<std::size_t> ExperimentConfig::scaling_node_list() const {
  std::vector<std::size_t> out;
  std::stringstream ss(scaling_nodes);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto v = to_u64("scaling_nodes", item);
    if (v == 0) throw InvalidArgument("scaling_nodes entries must be >= 1");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw InvalidArgument("scaling_nodes must list at least one size");
  return out;
}

void set_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(config, value);
      return;
    }
  }
  throw InvalidArgument("unknown config key: " + key);
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key = value");
    set_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

Setup generate(const ExperimentConfig& c) {
  c.validate();
  Setup s;
  s.topology = graph::generate_random_partition_graph(
      c.nodes, c.clusters, c.p_in, c.p_out, derive_seed(c.seed, Stream::topology));
  s.system = plant::generate_system(s.topology, c.state_dim, c.input_dim, c.scale, c.noise_std,
                                    c.seed);
  return s;
}

training::TrainingProblem make_problem(const ExperimentConfig& c, const Setup& setup) {
  c.validate();
  training::TrainingProblem p;
  p.system = setup.system;
  p.communication = setup.topology.symmetrized();
  p.shift = graph::shift_operator(p.communication, graph::parse_shift_kind(c.shift));
  p.activation = c.activation_fn();
  const std::size_t nodes = setup.system.nodes();
  p.loss.state_weight.assign(nodes, scaled_identity(c.state_dim, c.state_weight));
  p.loss.input_weight.assign(nodes, scaled_identity(c.input_dim, c.input_weight));
  p.loss.terminal_weight.assign(nodes, scaled_identity(c.state_dim, c.terminal_weight));
  p.loss.horizon = c.horizon;
  p.loss.batch = c.batch;
  p.config.epochs = c.epochs;
  p.config.test_samples = c.test_samples;
  p.config.window = c.window_mode();
  p.config.gradient = c.gradient_mode();
  p.config.init_mean = c.init_mean;
  p.config.init_std = c.init_std;
  p.config.schedule = {c.learning_rate, c.lr_decay};
  p.config.divergence_threshold = c.divergence_threshold;
  p.config.test_noise = c.test_noise;
  p.config.threads = c.threads;
  p.seed = c.seed;
  return p;
}

plant::LqrSolution solve_reference_lqr(const ExperimentConfig& c,
                                       const plant::NetworkedSystem& sys) {
  return plant::solve_lqr(sys, scaled_identity(sys.state_size(), c.state_weight),
                          scaled_identity(sys.input_size(), c.input_weight),
                          scaled_identity(sys.state_size(), c.terminal_weight));
}

Evaluation evaluate(const ExperimentConfig& c, const Setup& setup,
                    std::span<const grnn::NodeWeights> weights) {
  const auto& sys = setup.system;
  const auto lqr = solve_reference_lqr(c, sys);
  const Eigen::MatrixXd Q = scaled_identity(sys.state_size(), c.state_weight);
  const Eigen::MatrixXd R = scaled_identity(sys.input_size(), c.input_weight);
  const auto problem = make_problem(c, setup);
  grnn::GrnnController grnn_ctrl({weights.begin(), weights.end()}, problem.shift.matrix,
                                 problem.activation);
  plant::LinearFeedback lqr_ctrl(lqr.k);
  plant::ZeroController zero(sys.input_size());
  Evaluation ev;
  for (std::size_t s = 0; s < c.eval_samples; ++s) {
    auto rngs = plant::node_streams(c.seed, Stream::eval_init, sys.nodes(), 0, s);
    const Eigen::VectorXd x0 =
        plant::sample_initial_state(sys.nodes(), sys.state_dim(), c.init_mean, c.init_std, rngs);
    grnn_ctrl.reset();
    ev.grnn_cost.push_back(plant::quadratic_cost(
        plant::rollout(sys, grnn_ctrl, x0, c.compare_steps), Q, R, lqr.p));
    ev.lqr_cost.push_back(
        plant::quadratic_cost(plant::rollout(sys, lqr_ctrl, x0, c.compare_steps), Q, R, lqr.p));
    ev.open_loop_cost.push_back(
        plant::quadratic_cost(plant::rollout(sys, zero, x0, c.compare_steps), Q, R, lqr.p));
    ev.lqr_bound.push_back(x0.dot(lqr.p * x0));
  }
  return ev;
}

Comparison compare_lqr(const ExperimentConfig& c, const Setup& setup,
                       std::span<const grnn::NodeWeights> weights) {
  const auto& sys = setup.system;
  const auto lqr = solve_reference_lqr(c, sys);
  const auto problem = make_problem(c, setup);
  grnn::GrnnController grnn_ctrl({weights.begin(), weights.end()}, problem.shift.matrix,
                                 problem.activation);
  plant::LinearFeedback lqr_ctrl(lqr.k);
  const std::size_t T = c.compare_steps;
  Comparison cmp;
  cmp.avg_state_grnn.assign(T + 1, 0.0);
  cmp.avg_state_lqr.assign(T + 1, 0.0);
  cmp.avg_ctrl_grnn.assign(T, 0.0);
  cmp.avg_ctrl_lqr.assign(T, 0.0);
  const double inv = 1.0 / static_cast<double>(c.eval_samples);
  for (std::size_t s = 0; s < c.eval_samples; ++s) {
    auto init = plant::node_streams(c.seed, Stream::eval_init, sys.nodes(), 0, s);
    const Eigen::VectorXd x0 =
        plant::sample_initial_state(sys.nodes(), sys.state_dim(), c.init_mean, c.init_std, init);
    auto noise_a = plant::node_streams(c.seed, Stream::eval_noise, sys.nodes(), 0, s);
    auto noise_b = noise_a;  // common random numbers
    grnn_ctrl.reset();
    const auto tg = plant::rollout(sys, grnn_ctrl, x0, T, noise_a);
    const auto tl = plant::rollout(sys, lqr_ctrl, x0, T, noise_b);
    for (std::size_t t = 0; t <= T; ++t) {
      cmp.avg_state_grnn[t] += inv * node_norm_mean(tg.states[t], sys.nodes(), sys.state_dim());
      cmp.avg_state_lqr[t] += inv * node_norm_mean(tl.states[t], sys.nodes(), sys.state_dim());
      if (t < T) {
        cmp.avg_ctrl_grnn[t] += inv * node_norm_mean(tg.controls[t], sys.nodes(), sys.input_dim());
        cmp.avg_ctrl_lqr[t] += inv * node_norm_mean(tl.controls[t], sys.nodes(), sys.input_dim());
      }
    }
  }
  return cmp;
}

CertifyResult certify(const ExperimentConfig& c, const Setup& setup,
                      std::span<const grnn::NodeWeights> weights) {
  const auto problem = make_problem(c, setup);
  CertifyResult res;
  auto t0 = Clock::now();
  const auto blocks = grnn::stacked_weight_blocks(weights);
  const Eigen::MatrixXd F =
      grnn::state_feedback_map(blocks, problem.shift.matrix, setup.system.state_dim());
  const auto x_box = stability::Box::symmetric(setup.system.state_size(), c.state_box);
  res.box = stability::invariant_input_box(blocks.k1, F, x_box, problem.activation);
  const auto bounds = stability::activation_bounds(problem.activation, res.box.h);
  res.seconds["bounds"] = seconds_since(t0);
  t0 = Clock::now();
  const auto aug = stability::build_augmented(setup.system, weights, problem.shift.matrix, bounds);
  res.seconds["assemble"] = seconds_since(t0);
  t0 = Clock::now();
  stability::SearchBudget budget;
  budget.iterations = c.search_iterations;
  budget.epsilon = c.certify_epsilon;
  budget.threads = c.threads;
  budget.form = stability::parse_lmi_form(c.lmi_form);
  res.certificate = stability::search_certificate(aug, budget);
  res.seconds["search"] = seconds_since(t0);
  if (!res.box.converged)
    res.certificate.notes.push_back("input box iteration stopped before converging");
  return res;
}

LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("fit_line: need >= 2 points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += x[k];
    my += y[k];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxx += (x[k] - mx) * (x[k] - mx);
    sxy += (x[k] - mx) * (y[k] - my);
    syy += (y[k] - my) * (y[k] - my);
  }
  LinearFit f;
  f.slope = sxx > 0 ? sxy / sxx : 0.0;
  f.intercept = my - f.slope * mx;
  double sse = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double r = y[k] - (f.intercept + f.slope * x[k]);
    sse += r * r;
  }
  f.r2 = syy > 0 ? 1.0 - sse / syy : 1.0;
  return f;
}

std::vector<ScalingRow> scaling(const ExperimentConfig& base) {
  std::vector<ScalingRow> rows;
  for (std::size_t N : base.scaling_node_list()) {
    ExperimentConfig c = base;
    c.nodes = N;
    c.clusters = std::max<std::size_t>(1, N / c.scaling_cluster_size);
    c.p_out = std::min(1.0, c.scaling_inter_edges / static_cast<double>(N));
    c.epochs = std::max<std::size_t>(1, c.scaling_epochs);
    bool bounded = false;
    for (std::uint64_t attempt = 0; attempt < 200 && !bounded; ++attempt) {
      if (attempt > 0) c.seed = derive_seed(base.seed, Stream::topology, {N, attempt});
      const auto topo = graph::generate_random_partition_graph(
          c.nodes, c.clusters, c.p_in, c.p_out, derive_seed(c.seed, Stream::topology));
      bounded = topo.symmetrized().max_degree() <= c.scaling_max_degree;
    }
    if (!bounded)
      throw NumericalFailure("no graph with max degree <= " + std::to_string(c.scaling_max_degree) +
                             " at N = " + std::to_string(N));
    const Setup setup = generate(c);
    const auto problem = make_problem(c, setup);
    auto state = training::initial_state(
        problem, training::initial_weights(N, c.state_dim, c.input_dim, c.hidden_dim,
                                           c.weight_low, c.weight_high, c.seed));
    std::vector<double> times;
    for (std::size_t e = 0; e < c.epochs; ++e) {
      const auto t0 = Clock::now();
      training::run_epoch(problem, state);
      times.push_back(seconds_since(t0));
    }
    std::sort(times.begin(), times.end());
    const double median = times[times.size() / 2];
    rows.push_back({N, problem.communication.edges().size() / 2,
                    problem.communication.max_degree(), median,
                    median / static_cast<double>(N)});
  }
  return rows;
}

nlohmann::json stamp(const ExperimentConfig& c, nlohmann::json doc) {
  doc["config_hash"] = io::hex64(c.hash());
  doc["seed"] = c.seed;
  return doc;
}

void write_config_echo(const std::filesystem::path& dir, const ExperimentConfig& c) {
  io::write_text(dir / "config.txt", c.to_text());
}

void write_setup(const std::filesystem::path& dir, const ExperimentConfig& c, const Setup& s) {
  io::write_json(dir / "topology.json", stamp(c, graph::to_json(s.topology)));
  io::write_json(dir / "system.json", stamp(c, plant::to_json(s.system, "topology.json")));
}

Setup read_setup(const std::filesystem::path& dir) {
  const auto sys_doc = io::read_json(dir / "system.json");
  std::string topo_ref = "topology.json";
  if (sys_doc.contains("topology_ref") && sys_doc["topology_ref"].is_string() &&
      !sys_doc["topology_ref"].get<std::string>().empty())
    topo_ref = sys_doc["topology_ref"].get<std::string>();
  Setup s;
  s.topology = graph::topology_from_json(io::read_json(dir / topo_ref));
  s.system = plant::system_from_json(sys_doc, s.topology);
  return s;
}

}  // namespace netgrnn::experiment
