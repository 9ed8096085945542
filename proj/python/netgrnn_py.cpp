#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "netgrnn/errors.hpp"
#include "netgrnn/experiment.hpp"
#include "netgrnn/simnet.hpp"

namespace py = pybind11;
using namespace netgrnn;

namespace {

std::vector<std::pair<std::size_t, std::size_t>> edge_pairs(const graph::Topology& t) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& e : t.edges()) out.emplace_back(e.from, e.to);
  return out;
}

experiment::ExperimentConfig config_from(const py::dict& overrides) {
  experiment::ExperimentConfig c;
  for (const auto& [k, v] : overrides) {
    std::string value;
    if (py::isinstance<py::bool_>(v))
      value = v.cast<bool>() ? "true" : "false";
    else
      value = py::str(v).cast<std::string>();
    experiment::set_value(c, k.cast<std::string>(), value);
  }
  c.validate();
  return c;
}

py::dict history_dict(const training::LossHistory& h) {
  py::dict d;
  d["train"] = h.train;
  d["test"] = h.test;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Networked GRNN control: graphs, training, stability certificates";

  static py::exception<LocalityViolation> locality(m, "LocalityViolation", PyExc_RuntimeError);
  static py::exception<NumericalFailure> numerical(m, "NumericalFailure", PyExc_ArithmeticError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const LocalityViolation& e) {
      py::set_error(locality, e.what());
    } catch (const NumericalFailure& e) {
      py::set_error(numerical, e.what());
    } catch (const InvalidArgument& e) {
      py::set_error(PyExc_ValueError, e.what());
    }
  });

  py::class_<graph::Topology>(m, "Topology")
      .def(py::init([](std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
             std::vector<graph::Edge> es;
             for (const auto& [a, b] : edges) es.push_back({a, b});
             return graph::Topology(n, std::move(es));
           }),
           py::arg("n"), py::arg("edges"))
      .def_static("path", &graph::Topology::path)
      .def_static("ring", &graph::Topology::ring)
      .def_static("complete", &graph::Topology::complete)
      .def_static("empty", &graph::Topology::empty)
      .def_property_readonly("size", &graph::Topology::size)
      .def_property_readonly("edges", &edge_pairs)
      .def("neighbors",
           [](const graph::Topology& t, std::size_t i) {
             auto s = t.neighbors(i);
             return std::vector<std::size_t>(s.begin(), s.end());
           })
      .def("degree", &graph::Topology::degree)
      .def_property_readonly("max_degree", &graph::Topology::max_degree)
      .def("is_connected", &graph::Topology::is_connected)
      .def("is_undirected", &graph::Topology::is_undirected)
      .def("symmetrized", &graph::Topology::symmetrized)
      .def("__len__", &graph::Topology::size)
      .def("__eq__", [](const graph::Topology& a, const graph::Topology& b) { return a == b; });

  m.def("random_partition_graph", &graph::generate_random_partition_graph, py::arg("n"),
        py::arg("clusters"), py::arg("p_in"), py::arg("p_out"), py::arg("seed"));
  m.def(
      "shift_operator",
      [](const graph::Topology& t, const std::string& kind) {
        return graph::shift_operator(t, graph::parse_shift_kind(kind)).matrix;
      },
      py::arg("topology"), py::arg("kind") = "normalized_adjacency");
  m.def(
      "metropolis_hastings_weights",
      [](const graph::Topology& t) { return graph::metropolis_hastings_weights(t).matrix; },
      py::arg("topology"));

  py::class_<grnn::NodeWeights>(m, "NodeWeights")
      .def(py::init([](Eigen::MatrixXd t1, Eigen::MatrixXd t2, Eigen::MatrixXd t3,
                       Eigen::MatrixXd t4) {
             grnn::NodeWeights w{std::move(t1), std::move(t2), std::move(t3), std::move(t4)};
             w.validate();
             return w;
           }),
           py::arg("theta1"), py::arg("theta2"), py::arg("theta3"), py::arg("theta4"))
      .def_static("zeros", &grnn::NodeWeights::zeros, py::arg("n"), py::arg("m"), py::arg("p"))
      .def_readwrite("theta1", &grnn::NodeWeights::theta1)
      .def_readwrite("theta2", &grnn::NodeWeights::theta2)
      .def_readwrite("theta3", &grnn::NodeWeights::theta3)
      .def_readwrite("theta4", &grnn::NodeWeights::theta4);

  m.def(
      "network_forward",
      [](const std::vector<grnn::NodeWeights>& w, const Eigen::MatrixXd& z_prev,
         const Eigen::MatrixXd& x, const Eigen::MatrixXd& shift, const std::string& activation) {
        auto out = grnn::network_forward(w, z_prev, x, grnn::to_sparse(shift),
                                         grnn::Activation::parse(activation));
        py::dict d;
        d["h"] = out.h;
        d["z"] = out.z;
        d["u"] = out.u;
        d["aggregate"] = out.aggregate;
        return d;
      },
      py::arg("weights"), py::arg("z_prev"), py::arg("x"), py::arg("shift"),
      py::arg("activation") = "tanh");

  py::class_<experiment::ExperimentConfig>(m, "Config")
      .def(py::init(&config_from), py::arg("overrides") = py::dict())
      .def("set",
           [](experiment::ExperimentConfig& c, const std::string& k, const std::string& v) {
             experiment::set_value(c, k, v);
             c.validate();
           })
      .def("to_text", &experiment::ExperimentConfig::to_text)
      .def_property_readonly("hash", &experiment::ExperimentConfig::hash)
      .def_readonly("seed", &experiment::ExperimentConfig::seed)
      .def_readonly("nodes", &experiment::ExperimentConfig::nodes)
      .def_readonly("epochs", &experiment::ExperimentConfig::epochs);

  py::class_<experiment::Setup>(m, "Setup")
      .def_readonly("topology", &experiment::Setup::topology)
      .def_property_readonly("a", [](const experiment::Setup& s) { return s.system.a(); })
      .def_property_readonly("b", [](const experiment::Setup& s) { return s.system.b(); })
      .def_property_readonly("controllability_rank", [](const experiment::Setup& s) {
        return plant::controllability_rank(s.system);
      });

  m.def("generate", &experiment::generate, py::arg("config"));

  m.def(
      "train",
      [](const experiment::ExperimentConfig& c, const experiment::Setup& s, bool distributed) {
        auto problem = experiment::make_problem(c, s);
        auto init = training::initial_weights(s.system.nodes(), c.state_dim, c.input_dim,
                                              c.hidden_dim, c.weight_low, c.weight_high, c.seed);
        training::TrainResult r;
        {
          py::gil_scoped_release release;
          if (distributed)
            r = simnet::Harness(problem, {false, c.threads}).train(std::move(init));
          else
            r = training::train(problem, std::move(init));
        }
        py::dict d;
        d["weights"] = r.weights;
        d["history"] = history_dict(r.history);
        return d;
      },
      py::arg("config"), py::arg("setup"), py::arg("distributed") = false);

  m.def(
      "evaluate",
      [](const experiment::ExperimentConfig& c, const experiment::Setup& s,
         const std::vector<grnn::NodeWeights>& w) {
        auto ev = experiment::evaluate(c, s, w);
        py::dict d;
        d["grnn_cost"] = ev.grnn_cost;
        d["lqr_cost"] = ev.lqr_cost;
        d["open_loop_cost"] = ev.open_loop_cost;
        d["lqr_bound"] = ev.lqr_bound;
        return d;
      },
      py::arg("config"), py::arg("setup"), py::arg("weights"));

  m.def(
      "compare_lqr",
      [](const experiment::ExperimentConfig& c, const experiment::Setup& s,
         const std::vector<grnn::NodeWeights>& w) {
        auto cmp = experiment::compare_lqr(c, s, w);
        py::dict d;
        d["avg_state_grnn"] = cmp.avg_state_grnn;
        d["avg_state_lqr"] = cmp.avg_state_lqr;
        d["avg_ctrl_grnn"] = cmp.avg_ctrl_grnn;
        d["avg_ctrl_lqr"] = cmp.avg_ctrl_lqr;
        return d;
      },
      py::arg("config"), py::arg("setup"), py::arg("weights"));

  m.def(
      "certify",
      [](const experiment::ExperimentConfig& c, const experiment::Setup& s,
         const std::vector<grnn::NodeWeights>& w) {
        experiment::CertifyResult r;
        {
          py::gil_scoped_release release;
          r = experiment::certify(c, s, w);
        }
        py::dict d;
        d["certified"] = r.certificate.certified();
        d["max_eig"] = r.certificate.max_eig;
        d["p_min_eig"] = r.certificate.p_min_eig;
        d["ellipsoid_level"] = r.certificate.ellipsoid_level();
        d["p"] = r.certificate.p;
        d["notes"] = r.certificate.notes;
        d["json"] = stability::to_json(r.certificate).dump();
        return d;
      },
      py::arg("config"), py::arg("setup"), py::arg("weights"));

  m.def(
      "scaling",
      [](const experiment::ExperimentConfig& c) {
        py::list rows;
        for (const auto& r : experiment::scaling(c)) {
          py::dict d;
          d["nodes"] = r.nodes;
          d["edges"] = r.edges;
          d["max_degree"] = r.max_degree;
          d["epoch_seconds"] = r.epoch_seconds;
          d["per_node_epoch_seconds"] = r.per_node_epoch_seconds;
          rows.append(d);
        }
        return rows;
      },
      py::arg("config"));
}
