#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mstage/engine.h"
#include "mstage/errors.h"
#include "mstage/harness.h"
#include "mstage/policy.h"
#include "mstage/topology.h"

namespace py = pybind11;
using namespace mstage;

namespace {

PolicyKind KindFromName(const std::string& name) {
  auto k = ParsePolicyKind(name);
  if (!k) throw ConfigError("unknown policy '" + name + "'");
  return *k;
}

py::dict LedgerDict(const RegretLedger& ledger) {
  py::dict d;
  d["rounds"] = ledger.rounds_elapsed();
  d["cumulative_cost"] = ledger.cumulative_algorithm_cost();
  d["optimal_stationary_cost"] = ledger.optimal_stationary_cost();
  d["regret"] = ledger.regret();
  d["time_average_regret"] = ledger.time_average_regret();
  d["cumulative_leaf_costs"] = ledger.cumulative_leaf_costs();
  if (ledger.has_expected()) d["expected_regret"] = ledger.expected_regret();
  return d;
}

ExperimentConfig Configure(const std::string& source, std::optional<int> seeds,
                           std::optional<std::vector<Round>> horizons,
                           std::optional<std::vector<std::string>> policies,
                           std::optional<std::uint64_t> master_seed) {
  ExperimentConfig cfg = LoadConfig(source);
  if (seeds) cfg.seed_count = *seeds;
  if (horizons) {
    cfg.horizons = *horizons;
    cfg.trend_anchor.reset();
  }
  if (policies) {
    cfg.policies.clear();
    for (const auto& name : *policies) {
      PolicySpec spec;
      spec.kind = KindFromName(name);
      cfg.policies.push_back(spec);
    }
    cfg.trend_policy.clear();
  }
  if (master_seed) cfg.master_seed = *master_seed;
  CheckConfig(cfg);
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-stage online learning simulator";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  py::class_<TreeTopology, std::shared_ptr<TreeTopology>>(m, "Topology")
      .def_property_readonly("node_count", &TreeTopology::node_count)
      .def_property_readonly("depth", &TreeTopology::depth)
      .def_property_readonly("max_fanout", &TreeTopology::max_fanout)
      .def_property_readonly("leaves", &TreeTopology::leaves)
      .def("children", &TreeTopology::children, py::arg("node"))
      .def("parent", &TreeTopology::parent, py::arg("node"))
      .def("is_leaf", &TreeTopology::is_leaf, py::arg("node"))
      .def("label", &TreeTopology::label, py::arg("node"))
      .def("to_adjacency", &TreeTopology::ToAdjacencyText);

  m.def("uniform_tree", [](int D, int L) {
    return std::make_shared<TreeTopology>(BuildUniformTree(D, L));
  }, py::arg("D"), py::arg("L"));
  m.def("chain_tree", [](int L) {
    return std::make_shared<TreeTopology>(BuildChainTree(L));
  }, py::arg("L"));
  m.def("parse_adjacency", [](const std::string& text) {
    return std::make_shared<TreeTopology>(ParseAdjacency(text));
  }, py::arg("text"));

  m.def("default_params", [](Round T, int L, int D, bool all_leaves) {
    const PolicyParams p = DefaultParams(T, L, D, all_leaves);
    return py::make_tuple(p.eta, p.epsilon);
  }, py::arg("T"), py::arg("L"), py::arg("D"), py::arg("children_all_leaves"),
     "(eta, epsilon) for fixed-horizon eps-EXP3.");

  m.def("mixture_distribution", [](std::vector<double> theta, double eta, double epsilon) {
    NodePolicyState s(static_cast<int>(theta.size()), {eta, epsilon});
    s.theta = std::move(theta);
    return MixtureDistribution(s);
  }, py::arg("theta"), py::arg("eta"), py::arg("epsilon"));

  m.def("eexp3_estimate", [](std::vector<double> theta, double eta, double epsilon,
                             const std::string& mode, int child, double cost,
                             double receive_prob) {
    NodePolicyState s(static_cast<int>(theta.size()), {eta, epsilon});
    s.theta = std::move(theta);
    ModeDraw d{mode == "U" ? Mode::kUniform : Mode::kExp3, child};
    return Eexp3Estimate(s, d, cost, receive_prob);
  }, py::arg("theta"), py::arg("eta"), py::arg("epsilon"), py::arg("mode"),
     py::arg("child"), py::arg("cost"), py::arg("receive_prob"));

  m.def("bernoulli_ladder", &BernoulliLadder, py::arg("leaf_count"), py::arg("p_min"));

  m.def("run_bernoulli", [](int D, int L, const std::string& policy, Round T,
                            std::uint64_t seed, std::optional<double> p_min) {
    auto tree = std::make_shared<const TreeTopology>(BuildUniformTree(D, L));
    auto env = std::make_shared<const BernoulliTreeEnv>(
        MakeBernoulliTreeEnv(*tree, p_min.value_or(DefaultPMin(L)), T));
    RunSpec spec;
    spec.tree = tree;
    spec.env = env;
    spec.policy.kind = KindFromName(policy);
    spec.horizon = T;
    spec.seed = seed;
    spec.track_expected = true;
    RunResult r;
    {
      py::gil_scoped_release release;
      r = RunHorizon(spec);
    }
    return LedgerDict(r.ledger);
  }, py::arg("D"), py::arg("L"), py::arg("policy"), py::arg("T"),
     py::arg("seed") = 0, py::arg("p_min") = py::none(),
     "One run on the shifting Bernoulli tree; returns the regret ledger.");

  m.def("scenarios", [] {
    std::vector<std::string> names;
    for (const auto& b : BundledConfigs()) names.emplace_back(b.name);
    return names;
  });

  m.def("validate", [](const std::string& source) {
    Configure(source, std::nullopt, std::nullopt, std::nullopt, std::nullopt);
  }, py::arg("config"), "Raises ConfigError when the config is invalid.");

  m.def("run_experiment", [](const std::string& source, std::optional<int> seeds,
                             std::optional<std::vector<Round>> horizons,
                             std::optional<std::vector<std::string>> policies,
                             std::optional<std::uint64_t> master_seed) {
    ExperimentConfig cfg = Configure(source, seeds, horizons, policies, master_seed);
    ExperimentResult res;
    {
      py::gil_scoped_release release;
      res = RunExperiment(cfg);
    }
    py::list rows;
    for (const auto& a : res.aggregates) {
      py::dict d;
      d["scenario"] = a.scenario;
      d["policy"] = a.policy;
      d["D"] = a.fanout;
      d["L"] = a.depth;
      d["T"] = a.horizon;
      d["seed_count"] = a.seed_count;
      d["mean_regret"] = a.mean_regret;
      d["mean_time_avg_regret"] = a.mean_time_avg_regret;
      d["stddev"] = a.stddev;
      rows.append(d);
    }
    return rows;
  }, py::arg("config"), py::arg("seeds") = py::none(),
     py::arg("horizons") = py::none(), py::arg("policies") = py::none(),
     py::arg("master_seed") = py::none(),
     "Runs a bundled scenario or config file and returns aggregate rows.");

  m.def("fit_loglog_slope", [](const std::vector<std::pair<double, double>>& pts) {
    return FitLogLogSlope(pts).slope;
  }, py::arg("points"));
}
