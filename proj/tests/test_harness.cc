#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mstage/errors.h"
#include "mstage/harness.h"

using namespace mstage;
namespace fs = std::filesystem;

namespace {

std::string DataPath(const std::string& name) {
  return std::string(MSTAGE_TEST_DATA_DIR) + "/" + name;
}

std::string ConfigErrorText(const std::string& json) {
  try {
    ParseConfig(json);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

std::string Slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kSmall = R"({
  "scenario": "small",
  "topology": {"kind": "uniform", "D": 2, "L": 2},
  "env": {"kind": "bernoulli"},
  "policies": ["eps-exp3", "exp3"],
  "horizons": [200, 400, 800],
  "seeds": {"count": 3}
})";

}  // namespace

TEST_CASE("default p_min by depth") {
  CHECK(DefaultPMin(2) == 0.2);
  CHECK(DefaultPMin(3) == 0.4);
  CHECK(DefaultPMin(4) == 0.6);
}

TEST_CASE("parse a minimal config") {
  const auto cfg = ParseConfig(kSmall);
  CHECK(cfg.scenario == "small");
  CHECK(cfg.topology.fanout == 2);
  CHECK(cfg.policies.size() == 2u);
  CHECK(cfg.horizons == std::vector<Round>{200, 400, 800});
  CHECK(cfg.seed_count == 3);
  CHECK(cfg.master_seed == kDefaultMasterSeed);
  CHECK_FALSE(cfg.expected_regret);
  CHECK_FALSE(cfg.trace.enabled);
}

TEST_CASE("config errors name their keys") {
  auto msg = ConfigErrorText(R"({"scenario": "x", "topology": {"D": 2, "L": 0},
      "policies": ["eps-exp3"], "horizons": [100]})");
  CHECK(msg.find("topology.L") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "topology": {"D": 1, "L": 0},
      "policies": ["eps-exp3"], "horizons": [100]})");
  CHECK(msg.find("topology.L") != std::string::npos);
  CHECK(msg.find("topology.D") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "bogus": 1, "policies": ["eps-exp3"],
      "horizons": [100]})");
  CHECK(msg.find("bogus") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "policies": ["broad-omd"], "horizons": [100]})");
  CHECK(msg.find("policies[0]") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "policies": ["eps-exp3"], "horizons": [100, 100]})");
  CHECK(msg.find("horizons[1]") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "policies": ["eps-exp3"], "horizons": [100.5]})");
  CHECK(msg.find("horizons[0]") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "policies": ["eps-exp3", "eps-exp3"], "horizons": [100]})");
  CHECK(msg.find("duplicate") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "policies": ["eps-exp3"], "horizons": [100],
      "trend": {"anchor_T": 50}})");
  CHECK(msg.find("trend.anchor_T") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "policies": ["eps-exp3"], "horizons": [100],
      "seeds": {"count": 0}})");
  CHECK(msg.find("seeds.count") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "topology": {"kind": "chain", "L": 2},
      "env": {"kind": "lower_bound", "delta": 0.3}, "policies": ["oracle"], "horizons": [100]})");
  CHECK(msg.find("env") != std::string::npos);

  msg = ConfigErrorText(R"({"scenario": "x", "policies": ["eps-exp3"], "horizons": [100],
      "trace": {"watch": [[0, 3]]}})");
  CHECK(msg.find("trace.watch[0]") != std::string::npos);

  CHECK(ConfigErrorText("{not json").find("JSON") != std::string::npos);
  CHECK(ConfigErrorText(R"({"policies": ["eps-exp3"], "horizons": [100]})").find("scenario") !=
        std::string::npos);
}

TEST_CASE("integral floats are accepted for integer keys") {
  const auto cfg = ParseConfig(R"({"scenario": "x", "policies": ["eps-exp3"],
      "horizons": [1e3, 1e5]})");
  CHECK(cfg.horizons == std::vector<Round>{1000, 100000});
}

TEST_CASE("policy objects carry overrides") {
  const auto cfg = ParseConfig(R"({"scenario": "x", "horizons": [100],
      "policies": [{"kind": "eps-exp3", "name": "hot", "eta": 0.5, "epsilon": 0.1},
                   {"kind": "exp3", "gamma": 0.2}]})");
  REQUIRE(cfg.policies.size() == 2u);
  CHECK(cfg.policies[0].label() == "hot");
  CHECK(*cfg.policies[0].eta == 0.5);
  CHECK(*cfg.policies[0].epsilon == 0.1);
  CHECK(*cfg.policies[1].gamma == 0.2);
}

TEST_CASE("bundled configs all parse") {
  std::set<std::string> names;
  for (const auto& b : BundledConfigs()) {
    const auto cfg = ParseConfig(b.json);
    CHECK(cfg.scenario == b.name);
    CHECK(cfg.description.find("Fig.") != std::string::npos);
    names.insert(std::string(b.name));
  }
  for (const char* want : {"fig7-D2L2", "fig7-D2L3", "fig7-D2L4", "fig7-D4L2",
                           "fig7-D4L3", "fig7-D4L4", "fig8-transient", "fig9-mec",
                           "fig10-multihop", "lowerbound-chain"}) {
    CHECK(names.count(want) == 1);
  }
  const auto fig7 = LoadConfig("fig7-D2L2");
  CHECK(fig7.seed_count == 20);
  CHECK(fig7.horizons.size() == 5u);
  CHECK_THROWS_AS(LoadConfig("no-such-scenario"), ConfigError);
}

TEST_CASE("config files resolve references next to themselves") {
  const auto cfg = LoadConfig(DataPath("replay.json"));
  CHECK(cfg.topology.kind == TopologyConfig::Kind::kAdjacency);
  CHECK(cfg.env.kind == EnvConfig::Kind::kCsv);
  const auto tree = BuildTopology(cfg.topology);
  CHECK(tree->leaves() == std::vector<NodeId>{1, 3, 4});
}

TEST_CASE("deterministic env, stationary optimum, one seed") {
  auto cfg = LoadConfig(DataPath("replay.json"));
  cfg.policies.resize(1);
  const auto res = RunExperiment(cfg);
  REQUIRE(res.aggregates.size() == 1u);
  CHECK(res.aggregates[0].mean_regret == 0.0);
  CHECK(res.aggregates[0].stddev == 0.0);
  CHECK(res.aggregates[0].seed_count == 1);
}

TEST_CASE("csv env needs enough rounds") {
  auto cfg = LoadConfig(DataPath("replay.json"));
  cfg.horizons = {11};
  const auto errors = ValidateConfig(cfg);
  REQUIRE(errors.size() == 1u);
  CHECK(errors[0].rfind("env", 0) == 0);
}

TEST_CASE("replication count and ordering") {
  auto cfg = ParseConfig(kSmall);
  cfg.seed_count = 20;
  cfg.horizons = {300, 100};
  const auto res = RunExperiment(cfg);
  REQUIRE(res.aggregates.size() == 4u);
  for (const auto& r : res.aggregates) {
    CHECK(r.seed_count == 20);
    CHECK(r.fanout == 2);
    CHECK(r.depth == 2);
  }
  CHECK(res.aggregates[0].policy == "eps-exp3");
  CHECK(res.aggregates[0].horizon == 100);
  CHECK(res.aggregates[1].horizon == 300);
  CHECK(res.aggregates[2].policy == "exp3");
  CHECK(res.per_seed.size() == 80u);
  // aggregate mean is the mean of the per-seed regrets
  double sum = 0.0;
  for (int s = 0; s < 20; ++s) sum += res.per_seed[s].regret;
  CHECK(res.aggregates[0].mean_regret == doctest::Approx(sum / 20));
  CHECK(res.aggregates[0].mean_time_avg_regret == doctest::Approx(sum / 20 / 100));
}

TEST_CASE("results do not depend on the thread count") {
  auto cfg = ParseConfig(kSmall);
  cfg.per_seed = true;
  cfg.threads = 1;
  const auto a = RunExperiment(cfg);
  cfg.threads = 4;
  const auto b = RunExperiment(cfg);
  CHECK(ResultsCsv(a.aggregates) == ResultsCsv(b.aggregates));
  CHECK(PerSeedCsv("s", a.per_seed) == PerSeedCsv("s", b.per_seed));
}

TEST_CASE("master seed changes results") {
  auto cfg = ParseConfig(kSmall);
  const auto a = RunExperiment(cfg);
  cfg.master_seed = 1;
  const auto b = RunExperiment(cfg);
  CHECK(ResultsCsv(a.aggregates) != ResultsCsv(b.aggregates));
}

TEST_CASE("written outputs are byte identical across runs") {
  auto cfg = ParseConfig(kSmall);
  cfg.per_seed = true;
  cfg.trace.enabled = true;
  cfg.trace.window = 100;
  cfg.trace.watch = {{0, 1}};
  const fs::path root = fs::temp_directory_path() / "mstage_harness_test";
  fs::remove_all(root);
  const auto w1 = WriteOutputs(cfg, RunExperiment(cfg), (root / "a").string());
  const auto w2 = WriteOutputs(cfg, RunExperiment(cfg), (root / "b").string());
  REQUIRE(w1.size() == w2.size());
  std::set<std::string> files;
  for (std::size_t i = 0; i < w1.size(); ++i) {
    files.insert(fs::path(w1[i]).filename().string());
    CHECK(Slurp(w1[i]) == Slurp(w2[i]));
  }
  for (const char* f : {"results.csv", "trend.csv", "slopes.csv", "per_seed.csv",
                        "trace_eps-exp3_T200.csv", "trace_exp3_T800.csv"}) {
    CHECK(files.count(f) == 1);
  }
  const std::string results = Slurp(root / "a" / "results.csv");
  CHECK(results.rfind("scenario,policy,D,L,T,seed_count,mean_time_avg_regret,stddev\n", 0) == 0);
  const std::string trace = Slurp(root / "a" / "trace_exp3_T400.csv");
  CHECK(trace.rfind("round_window_end,node_id,child_id,mean_selection_probability\n", 0) == 0);
  CHECK(trace.find("\n400,0,1,") != std::string::npos);
  fs::remove_all(root);
}

TEST_CASE("expected regret per seed") {
  auto cfg = LoadConfig("lowerbound-chain");
  cfg.horizons = {500};
  cfg.seed_count = 2;
  const auto res = RunExperiment(cfg);
  REQUIRE(res.per_seed.size() == 2u);
  const double floor_cost = 500 * (1 - 4 * 0.125) / 2;
  CHECK(res.per_seed[0].optimal_stationary_cost == doctest::Approx(floor_cost));
  CHECK(res.per_seed[0].regret ==
        doctest::Approx(res.per_seed[0].cumulative_cost - floor_cost));
}

TEST_CASE("asymptotic trend") {
  std::vector<AggregateResult> rows(3);
  rows[0].horizon = 100;
  rows[0].mean_time_avg_regret = 0.3;
  rows[1].horizon = 10000;
  rows[1].mean_time_avg_regret = 0.08;
  rows[2].horizon = 1000000;
  rows[2].mean_time_avg_regret = 0.01;
  const auto pts = AsymptoticTrend(rows, 2, 10000);
  REQUIRE(pts.size() == 3u);
  const double R = 0.08 * std::pow(10.0, 4.0 / 3.0);
  CHECK(pts[2].trend == doctest::Approx(0.08 * std::pow(10.0, 4.0 / 3.0) / 100.0).epsilon(1e-12));
  CHECK(pts[0].trend == doctest::Approx(R / std::pow(100.0, 1.0 / 3)).epsilon(1e-12));
  CHECK(pts[1].trend == 0.08);
  CHECK(pts[2].measured == 0.01);
  CHECK_THROWS_AS(AsymptoticTrend(rows, 2, 5000), ConfigError);
}

TEST_CASE("log-log slope") {
  std::vector<std::pair<double, double>> pts;
  for (double T : {1e3, 3162.0, 1e4, 31623.0, 1e5}) pts.emplace_back(T, 3.7 * std::pow(T, 2.0 / 3));
  auto fit = FitLogLogSlope(pts);
  CHECK(std::abs(fit.slope - 2.0 / 3) < 1e-9);
  CHECK(std::abs(fit.intercept - std::log(3.7)) < 1e-9);
  CHECK(fit.floored_points == 0);

  pts.clear();
  for (double T : {10.0, 100.0, 1000.0}) pts.emplace_back(T, 0.2 * T);
  CHECK(std::abs(FitLogLogSlope(pts).slope - 1.0) < 1e-9);

  pts = {{10.0, 0.0}, {100.0, 1.0}, {1000.0, 10.0}};
  CHECK(FitLogLogSlope(pts).floored_points == 1);

  pts = {{10.0, 1.0}, {100.0, 2.0}};
  CHECK_THROWS_AS(FitLogLogSlope(pts), std::invalid_argument);
  pts = {{0.0, 1.0}, {100.0, 2.0}, {1000.0, 3.0}};
  CHECK_THROWS_AS(FitLogLogSlope(pts), std::invalid_argument);
}

TEST_CASE("mean and stddev") {
  const double v[] = {1.0, 2.0, 3.0, 4.0};
  const auto [m, s] = MeanAndStddev(v);
  CHECK(m == 2.5);
  CHECK(s == doctest::Approx(std::sqrt(5.0 / 3.0)));
  const double one[] = {7.0};
  CHECK(MeanAndStddev(one).second == 0.0);
}

TEST_CASE("csv quoting") {
  AggregateResult r;
  r.scenario = "a,b";
  r.policy = "say \"hi\"";
  const std::string csv = ResultsCsv(std::span<const AggregateResult>(&r, 1));
  CHECK(csv.find("\"a,b\",\"say \"\"hi\"\"\"") != std::string::npos);
}
