// Command-line driver: generate, train, evaluate, compare-lqr, certify, scaling.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "netgrnn/errors.hpp"
#include "netgrnn/experiment.hpp"
#include "netgrnn/io.hpp"
#include "netgrnn/simnet.hpp"

namespace fs = std::filesystem;
using namespace netgrnn;

namespace {

constexpr int kExitInvalid = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitLocality = 4;

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::size_t> threads;
  bool log_messages = false;
  std::vector<std::string> overrides;
  std::string system_dir;
  std::string weights_path;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "key = value config file");
  cmd->add_option("--seed", o.seed, "master RNG seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--threads", o.threads, "worker threads (0 = auto)");
  cmd->add_flag("--log-messages", o.log_messages, "record the message log (train)");
  cmd->add_option("--set", o.overrides, "override a config key: key=value")->allow_extra_args(false);
}

experiment::ExperimentConfig resolve(const CommonOptions& o) {
  experiment::ExperimentConfig c;
  if (!o.config_path.empty()) c = experiment::load_config(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got " + kv);
    experiment::set_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.seed = *o.seed;
  if (o.threads) c.threads = *o.threads;
  if (o.log_messages) c.log_messages = true;
  c.validate();
  return c;
}

experiment::Setup load_or_generate(const CommonOptions& o, const experiment::ExperimentConfig& c) {
  if (!o.system_dir.empty()) return experiment::read_setup(o.system_dir);
  return experiment::generate(c);
}

std::vector<grnn::NodeWeights> load_weights(const CommonOptions& o) {
  const fs::path path = o.weights_path.empty() ? fs::path(o.out) / "weights.json" : fs::path(o.weights_path);
  return grnn::weights_from_json(io::read_json(path));
}

void write_manifest(const fs::path& dir, const experiment::ExperimentConfig& c,
                    const std::string& command, const std::vector<std::string>& files) {
  nlohmann::json doc;
  doc["command"] = command;
  doc["files"] = files;
  io::write_json(dir / "manifest.json", experiment::stamp(c, doc));
  experiment::write_config_echo(dir, c);
}

template <class F>
std::string write_csv(const fs::path& dir, const std::string& name, F&& body) {
  std::ostringstream out;
  body(out);
  io::write_text(dir / name, out.str());
  return name;
}

int cmd_generate(const CommonOptions& o) {
  const auto c = resolve(o);
  const auto setup = experiment::generate(c);
  const fs::path dir = o.out;
  experiment::write_setup(dir, c, setup);
  write_manifest(dir, c, "generate", {"topology.json", "system.json"});
  std::cout << "generated N=" << setup.system.nodes() << " n=" << setup.system.state_dim()
            << " m=" << setup.system.input_dim()
            << " edges=" << setup.topology.edges().size()
            << " controllability_rank=" << plant::controllability_rank(setup.system) << "/"
            << setup.system.state_size() << "\n";
  return 0;
}

int cmd_train(const CommonOptions& o, bool checkpoints) {
  const auto c = resolve(o);
  const auto setup = load_or_generate(o, c);
  const auto problem = experiment::make_problem(c, setup);
  auto init = training::initial_weights(setup.system.nodes(), c.state_dim, c.input_dim,
                                        c.hidden_dim, c.weight_low, c.weight_high, c.seed);
  const fs::path dir = o.out;
  std::vector<std::string> files;
  auto on_epoch = [&](std::size_t e, std::span<const grnn::NodeWeights> w) {
    if (checkpoints) {
      const std::string name = "weights_epoch_" + std::to_string(e) + ".json";
      io::write_json(dir / name, experiment::stamp(c, grnn::to_json(w, problem.activation)));
      files.push_back(name);
    }
  };
  const auto t0 = std::chrono::steady_clock::now();
  training::TrainResult result;
  std::vector<simnet::LogEntry> log;
  if (c.distributed || c.log_messages) {
    simnet::Harness harness(problem, {c.log_messages, c.threads});
    result = harness.train(std::move(init), on_epoch);
    log = harness.message_log();
  } else {
    result = training::train(problem, std::move(init), on_epoch);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (o.system_dir.empty()) {
    experiment::write_setup(dir, c, setup);
    files.push_back("topology.json");
    files.push_back("system.json");
  }
  io::write_json(dir / "weights.json",
                 experiment::stamp(c, grnn::to_json(result.weights, problem.activation)));
  files.push_back("weights.json");
  files.push_back(write_csv(dir, "loss.csv",
                            [&](std::ostream& out) { training::write_loss_csv(out, result.history); }));
  if (c.log_messages)
    files.push_back(write_csv(dir, "messages.csv",
                              [&](std::ostream& out) { simnet::write_message_log_csv(out, log); }));
  write_manifest(dir, c, "train", files);
  for (std::size_t e = 0; e < result.history.train.size(); ++e)
    std::cout << "epoch " << e << " train " << io::format_double(result.history.mean_train(e))
              << " test " << io::format_double(result.history.mean_test(e)) << "\n";
  std::cout << "trained " << result.history.train.size() << " epochs in " << secs << " s\n";
  return 0;
}

int cmd_evaluate(const CommonOptions& o) {
  const auto c = resolve(o);
  const auto setup = load_or_generate(o, c);
  const auto weights = load_weights(o);
  const auto ev = experiment::evaluate(c, setup, weights);
  const fs::path dir = o.out;
  const auto csv = write_csv(dir, "evaluate.csv", [&](std::ostream& out) {
    out << "sample,grnn_cost,lqr_cost,open_loop_cost\n";
    for (std::size_t s = 0; s < ev.grnn_cost.size(); ++s)
      out << s << ',' << io::format_double(ev.grnn_cost[s]) << ','
          << io::format_double(ev.lqr_cost[s]) << ',' << io::format_double(ev.open_loop_cost[s])
          << '\n';
  });
  std::size_t violations = 0;
  double g = 0, l = 0;
  for (std::size_t s = 0; s < ev.grnn_cost.size(); ++s) {
    if (ev.grnn_cost[s] < ev.lqr_cost[s]) ++violations;
    g += ev.grnn_cost[s];
    l += ev.lqr_cost[s];
  }
  nlohmann::json summary{{"mean_grnn_cost", g / ev.grnn_cost.size()},
                         {"mean_lqr_cost", l / ev.lqr_cost.size()},
                         {"lqr_violations", violations}};
  io::write_json(dir / "evaluate.json", experiment::stamp(c, summary));
  write_manifest(dir, c, "evaluate", {csv, "evaluate.json"});
  std::cout << "mean cost grnn " << io::format_double(g / ev.grnn_cost.size()) << " lqr "
            << io::format_double(l / ev.lqr_cost.size()) << " violations " << violations << "\n";
  return 0;
}

int cmd_compare(const CommonOptions& o) {
  const auto c = resolve(o);
  const auto setup = load_or_generate(o, c);
  const auto weights = load_weights(o);
  const auto cmp = experiment::compare_lqr(c, setup, weights);
  const fs::path dir = o.out;
  const auto csv = write_csv(dir, "comparison.csv", [&](std::ostream& out) {
    out << "t,avg_state_grnn,avg_state_lqr,avg_ctrl_grnn,avg_ctrl_lqr\n";
    for (std::size_t t = 0; t < cmp.avg_state_grnn.size(); ++t) {
      out << t << ',' << io::format_double(cmp.avg_state_grnn[t]) << ','
          << io::format_double(cmp.avg_state_lqr[t]) << ',';
      if (t < cmp.avg_ctrl_grnn.size())
        out << io::format_double(cmp.avg_ctrl_grnn[t]) << ','
            << io::format_double(cmp.avg_ctrl_lqr[t]);
      else
        out << ',';
      out << '\n';
    }
  });
  const double ratio = cmp.avg_state_grnn.back() / cmp.avg_state_lqr.back();
  nlohmann::json summary{{"steps", c.compare_steps},
                         {"final_avg_state_grnn", cmp.avg_state_grnn.back()},
                         {"final_avg_state_lqr", cmp.avg_state_lqr.back()},
                         {"final_ratio", ratio}};
  io::write_json(dir / "comparison.json", experiment::stamp(c, summary));
  write_manifest(dir, c, "compare-lqr", {csv, "comparison.json"});
  std::cout << "t=" << c.compare_steps << " avg state grnn "
            << io::format_double(cmp.avg_state_grnn.back()) << " lqr "
            << io::format_double(cmp.avg_state_lqr.back()) << " ratio "
            << io::format_double(ratio) << "\n";
  return 0;
}

int cmd_certify(const CommonOptions& o) {
  const auto c = resolve(o);
  const auto setup = load_or_generate(o, c);
  std::vector<grnn::NodeWeights> weights;
  if (!o.weights_path.empty() || fs::exists(fs::path(o.out) / "weights.json"))
    weights = load_weights(o);
  else
    weights.assign(setup.system.nodes(),
                   grnn::NodeWeights::zeros(c.state_dim, c.input_dim, c.hidden_dim));
  const auto res = experiment::certify(c, setup, weights);
  const fs::path dir = o.out;
  auto doc = stability::to_json(res.certificate);
  doc["timing_seconds"] = res.seconds;
  doc["state_box"] = c.state_box;
  io::write_json(dir / "certificate.json", experiment::stamp(c, doc));
  write_manifest(dir, c, "certify", {"certificate.json"});
  std::cout << stability::to_string(res.certificate.verdict)
            << " max_eig=" << io::format_double(res.certificate.max_eig)
            << " p_min_eig=" << io::format_double(res.certificate.p_min_eig) << "\n";
  for (const auto& [phase, s] : res.seconds) std::cout << "  " << phase << " " << s << " s\n";
  return 0;
}

int cmd_scaling(const CommonOptions& o) {
  const auto c = resolve(o);
  const auto rows = experiment::scaling(c);
  const fs::path dir = o.out;
  std::vector<double> xs, ys;
  const auto csv = write_csv(dir, "scaling.csv", [&](std::ostream& out) {
    out << "N,edges,max_degree,epoch_seconds,per_node_epoch_seconds\n";
    for (const auto& r : rows) {
      out << r.nodes << ',' << r.edges << ',' << r.max_degree << ','
          << io::format_double(r.epoch_seconds) << ',' << io::format_double(r.per_node_epoch_seconds)
          << '\n';
      xs.push_back(static_cast<double>(r.nodes));
      ys.push_back(r.epoch_seconds);
    }
  });
  nlohmann::json summary;
  if (xs.size() >= 2) {
    const auto fit = experiment::fit_line(xs, ys);
    summary = {{"slope", fit.slope}, {"intercept", fit.intercept}, {"r2", fit.r2}};
    std::cout << "linear fit: slope " << fit.slope << " s/node, R^2 " << fit.r2 << "\n";
  }
  io::write_json(dir / "scaling.json", experiment::stamp(c, summary));
  write_manifest(dir, c, "scaling", {csv, "scaling.json"});
  for (const auto& r : rows)
    std::cout << "N=" << r.nodes << " epoch " << r.epoch_seconds << " s, per node "
              << r.per_node_epoch_seconds << " s\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Networked GRNN control: simulation, distributed training, stability checks"};
  app.require_subcommand(1);
  CommonOptions o;
  bool checkpoints = false;

  auto* gen = app.add_subcommand("generate", "generate topology and plant");
  add_common(gen, o);
  auto* train = app.add_subcommand("train", "train the distributed controller");
  add_common(train, o);
  train->add_option("--system", o.system_dir, "directory with system.json/topology.json");
  train->add_flag("--checkpoint", checkpoints, "write weights after every epoch");
  auto* eval = app.add_subcommand("evaluate", "noise-free costs against LQR and open loop");
  add_common(eval, o);
  auto* cmp = app.add_subcommand("compare-lqr", "per-time averages against LQR");
  add_common(cmp, o);
  auto* cert = app.add_subcommand("certify", "search for a stability certificate");
  add_common(cert, o);
  for (auto* sub : {eval, cmp, cert}) {
    sub->add_option("--system", o.system_dir, "directory with system.json/topology.json");
    sub->add_option("--weights", o.weights_path, "weights JSON (default OUT/weights.json)");
  }
  auto* scale = app.add_subcommand("scaling", "per-epoch wall time against N");
  add_common(scale, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInvalid;
  }

  try {
    if (*gen) return cmd_generate(o);
    if (*train) return cmd_train(o, checkpoints);
    if (*eval) return cmd_evaluate(o);
    if (*cmp) return cmd_compare(o);
    if (*cert) return cmd_certify(o);
    if (*scale) return cmd_scaling(o);
  } catch (const LocalityViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitLocality;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
