#include "mstage/harness.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "mstage/errors.h"

namespace mstage {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// -- JSON reading with error collection ------------------------------------------

class Reader {
 public:
  explicit Reader(std::vector<std::string>& errors) : errors_(errors) {}

  void Error(const std::string& key, const std::string& message) {
    errors_.push_back(key + ": " + message);
  }

  bool Object(const json& j, const std::string& key) {
    if (j.is_object()) return true;
    Error(key, "expected an object");
    return false;
  }

  void AllowKeys(const json& obj, const std::string& path,
                 std::initializer_list<std::string_view> allowed) {
    for (const auto& [k, v] : obj.items()) {
      if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
        Error(Join(path, k), "unknown key");
      }
    }
  }

  static std::string Join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
  }

  template <typename T>
  std::optional<T> Get(const json& obj, const std::string& path,
                       std::string_view key) {
    auto it = obj.find(std::string(key));
    if (it == obj.end()) return std::nullopt;
    return As<T>(*it, Join(path, key));
  }

  template <typename T>
  std::optional<T> As(const json& v, const std::string& key) {
    if constexpr (std::is_same_v<T, bool>) {
      if (v.is_boolean()) return v.get<bool>();
      Error(key, "expected true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (v.is_string()) return v.get<std::string>();
      Error(key, "expected a string");
    } else if constexpr (std::is_same_v<T, double>) {
      if (v.is_number()) return v.get<double>();
      Error(key, "expected a number");
    } else {
      // Integers may be written as 1e5 as long as the value is integral.
      if (v.is_number_integer()) return static_cast<T>(v.get<long long>());
      if (v.is_number_float()) {
        const double d = v.get<double>();
        if (std::isfinite(d) && d == std::floor(d) && std::fabs(d) < 9e15) {
          return static_cast<T>(d);
        }
      }
      Error(key, "expected an integer");
    }
    return std::nullopt;
  }

 private:
  std::vector<std::string>& errors_;
};

std::string ReadFile(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string ReadReferenced(Reader& r, const std::string& key,
                           const std::string& base_dir,
                           const std::string& file) {
  fs::path p(file);
  if (p.is_relative()) p = fs::path(base_dir) / p;
  try {
    return ReadFile(p);
  } catch (const ConfigError& e) {
    r.Error(key, e.what());
    return {};
  }
}

void ParseTopology(Reader& r, const json& j, const std::string& base_dir,
                   TopologyConfig& out) {
  const std::string path = "topology";
  if (!r.Object(j, path)) return;
  r.AllowKeys(j, path, {"kind", "D", "L", "path", "text"});
  const std::string kind = r.Get<std::string>(j, path, "kind").value_or("uniform");
  if (kind == "uniform") {
    out.kind = TopologyConfig::Kind::kUniform;
  } else if (kind == "chain") {
    out.kind = TopologyConfig::Kind::kChain;
  } else if (kind == "adjacency") {
    out.kind = TopologyConfig::Kind::kAdjacency;
  } else {
    r.Error("topology.kind", "unknown kind '" + kind +
                                 "' (uniform, chain, adjacency)");
  }
  if (auto d = r.Get<int>(j, path, "D")) out.fanout = *d;
  if (auto l = r.Get<int>(j, path, "L")) out.depth = *l;
  if (out.kind == TopologyConfig::Kind::kAdjacency) {
    auto text = r.Get<std::string>(j, path, "text");
    auto file = r.Get<std::string>(j, path, "path");
    if (text && file) {
      r.Error("topology", "give either 'text' or 'path', not both");
    } else if (text) {
      out.adjacency_text = *text;
    } else if (file) {
      out.adjacency_text = ReadReferenced(r, "topology.path", base_dir, *file);
    } else {
      r.Error("topology", "adjacency topology needs 'text' or 'path'");
    }
  }
}

void ParseLatency(Reader& r, const json& j, const std::string& path,
                  LatencyScenarioOptions& out) {
  if (auto v = r.Get<double>(j, path, "constant_rate")) out.constant_rate = *v;
  if (auto v = r.Get<double>(j, path, "ramp_start")) out.ramp_start = *v;
  if (auto v = r.Get<double>(j, path, "ramp_end")) out.ramp_end = *v;
  if (auto v = r.Get<double>(j, path, "deadline")) out.deadline = *v;
  auto it = j.find("profiles");
  if (it == j.end()) return;
  const std::string key = path + ".profiles";
  if (!it->is_array() || it->empty()) {
    r.Error(key, "expected a non-empty list of [time, miss_rate] pairs");
    return;
  }
  out.profiles.clear();
  for (std::size_t i = 0; i < it->size(); ++i) {
    const json& e = (*it)[i];
    const std::string ek = key + "[" + std::to_string(i) + "]";
    if (!e.is_array() || e.size() != 2) {
      r.Error(ek, "expected [time, miss_rate]");
      continue;
    }
    auto t = r.As<double>(e[0], ek);
    auto m = r.As<double>(e[1], ek);
    if (t && m) out.profiles.push_back({*t, *m});
  }
}

void ParseEnv(Reader& r, const json& j, const std::string& base_dir,
              EnvConfig& out) {
  const std::string path = "env";
  if (!r.Object(j, path)) return;
  const std::string kind = r.Get<std::string>(j, path, "kind").value_or("bernoulli");
  if (kind == "bernoulli") {
    out.kind = EnvConfig::Kind::kBernoulli;
    r.AllowKeys(j, path, {"kind", "p_min", "p", "shift_fraction", "shift_leaf"});
    out.p_min = r.Get<double>(j, path, "p_min");
    if (auto it = j.find("p"); it != j.end()) {
      if (!it->is_array()) {
        r.Error("env.p", "expected a list of leaf means");
      } else {
        for (std::size_t i = 0; i < it->size(); ++i) {
          if (auto v = r.As<double>((*it)[i], "env.p[" + std::to_string(i) + "]")) {
            out.p.push_back(*v);
          }
        }
      }
    }
    if (auto v = r.Get<double>(j, path, "shift_fraction")) out.shift_fraction = *v;
    if (auto v = r.Get<int>(j, path, "shift_leaf")) out.shift_leaf = *v;
  } else if (kind == "lower_bound") {
    out.kind = EnvConfig::Kind::kLowerBound;
    r.AllowKeys(j, path, {"kind", "delta", "best_last_leaf"});
    out.delta = r.Get<double>(j, path, "delta");
    if (auto v = r.Get<bool>(j, path, "best_last_leaf")) out.best_last_leaf = *v;
  } else if (kind == "mec" || kind == "multihop") {
    out.kind = kind == "mec" ? EnvConfig::Kind::kMec : EnvConfig::Kind::kMultihop;
    r.AllowKeys(j, path, {"kind", "constant_rate", "ramp_start", "ramp_end",
                          "deadline", "profiles"});
    ParseLatency(r, j, path, out.latency);
  } else if (kind == "csv" || kind == "custom") {
    out.kind = EnvConfig::Kind::kCsv;
    r.AllowKeys(j, path, {"kind", "path", "text"});
    auto text = r.Get<std::string>(j, path, "text");
    auto file = r.Get<std::string>(j, path, "path");
    if (text && file) {
      r.Error("env", "give either 'text' or 'path', not both");
    } else if (text) {
      out.csv_text = *text;
    } else if (file) {
      out.csv_text = ReadReferenced(r, "env.path", base_dir, *file);
    } else {
      r.Error("env", "csv environment needs 'text' or 'path'");
    }
  } else {
    r.Error("env.kind", "unknown kind '" + kind +
                            "' (bernoulli, lower_bound, mec, multihop, csv)");
  }
}

void ParsePolicy(Reader& r, const json& j, const std::string& key,
                 PolicySpec& out) {
  std::string kind;
  if (j.is_string()) {
    kind = j.get<std::string>();
  } else if (j.is_object()) {
    r.AllowKeys(j, key, {"kind", "name", "eta", "epsilon", "gamma", "oracle_q",
                         "oracle_shape", "stationary_leaf"});
    auto k = r.Get<std::string>(j, key, "kind");
    if (!k) {
      r.Error(key + ".kind", "missing");
      return;
    }
    kind = *k;
    if (auto v = r.Get<std::string>(j, key, "name")) out.name = *v;
    out.eta = r.Get<double>(j, key, "eta");
    out.epsilon = r.Get<double>(j, key, "epsilon");
    out.gamma = r.Get<double>(j, key, "gamma");
    out.oracle_q = r.Get<double>(j, key, "oracle_q");
    if (auto v = r.Get<std::string>(j, key, "oracle_shape")) {
      if (*v == "constant") {
        out.oracle_shape = OracleShape::kConstant;
      } else if (*v == "exponential") {
        out.oracle_shape = OracleShape::kExponential;
      } else {
        r.Error(key + ".oracle_shape", "expected 'constant' or 'exponential'");
      }
    }
    if (auto v = r.Get<int>(j, key, "stationary_leaf")) out.stationary_leaf = *v;
  } else {
    r.Error(key, "expected a policy name or object");
    return;
  }
  if (auto k = ParsePolicyKind(kind)) {
    out.kind = *k;
  } else {
    r.Error(key + ".kind", "unknown policy '" + kind + "'");
  }
}

void ParseTrace(Reader& r, const json& j, TraceConfig& out) {
  const std::string path = "trace";
  if (!r.Object(j, path)) return;
  r.AllowKeys(j, path, {"enabled", "window", "watch"});
  if (auto v = r.Get<bool>(j, path, "enabled")) out.enabled = *v;
  if (auto v = r.Get<Round>(j, path, "window")) out.window = *v;
  if (auto it = j.find("watch"); it != j.end()) {
    if (!it->is_array()) {
      r.Error("trace.watch", "expected a list of [node, child] pairs");
      return;
    }
    for (std::size_t i = 0; i < it->size(); ++i) {
      const json& e = (*it)[i];
      const std::string key = "trace.watch[" + std::to_string(i) + "]";
      if (!e.is_array() || e.size() != 2) {
        r.Error(key, "expected [node, child]");
        continue;
      }
      auto n = r.As<NodeId>(e[0], key);
      auto c = r.As<NodeId>(e[1], key);
      if (n && c) out.watch.emplace_back(*n, *c);
    }
  }
}

void ParseInto(Reader& r, const json& root, const std::string& base_dir,
               ExperimentConfig& cfg) {
  if (!r.Object(root, "config")) return;
  r.AllowKeys(root, "", {"scenario", "description", "topology", "env",
                         "policies", "horizons", "seeds", "regret", "trace",
                         "trend", "output", "threads"});
  if (auto v = r.Get<std::string>(root, "", "scenario")) cfg.scenario = *v;
  if (auto v = r.Get<std::string>(root, "", "description")) cfg.description = *v;
  if (auto it = root.find("topology"); it != root.end()) {
    ParseTopology(r, *it, base_dir, cfg.topology);
  }
  if (auto it = root.find("env"); it != root.end()) {
    ParseEnv(r, *it, base_dir, cfg.env);
  }
  if (auto it = root.find("policies"); it != root.end()) {
    if (!it->is_array()) {
      r.Error("policies", "expected a list");
    } else {
      for (std::size_t i = 0; i < it->size(); ++i) {
        PolicySpec spec;
        ParsePolicy(r, (*it)[i], "policies[" + std::to_string(i) + "]", spec);
        cfg.policies.push_back(std::move(spec));
      }
    }
  }
  if (auto it = root.find("horizons"); it != root.end()) {
    if (!it->is_array()) {
      r.Error("horizons", "expected a list of T values");
    } else {
      for (std::size_t i = 0; i < it->size(); ++i) {
        if (auto v = r.As<Round>((*it)[i], "horizons[" + std::to_string(i) + "]")) {
          cfg.horizons.push_back(*v);
        }
      }
    }
  }
  if (auto it = root.find("seeds"); it != root.end()) {
    if (r.Object(*it, "seeds")) {
      r.AllowKeys(*it, "seeds", {"count", "master_seed"});
      if (auto v = r.Get<int>(*it, "seeds", "count")) cfg.seed_count = *v;
      if (auto v = r.Get<long long>(*it, "seeds", "master_seed")) {
        if (*v < 0) {
          r.Error("seeds.master_seed", "must be >= 0");
        } else {
          cfg.master_seed = static_cast<std::uint64_t>(*v);
        }
      }
    }
  }
  if (auto v = r.Get<std::string>(root, "", "regret")) {
    if (*v == "realized") {
      cfg.expected_regret = false;
    } else if (*v == "expected") {
      cfg.expected_regret = true;
    } else {
      r.Error("regret", "expected 'realized' or 'expected'");
    }
  }
  if (auto it = root.find("trace"); it != root.end()) ParseTrace(r, *it, cfg.trace);
  if (auto it = root.find("trend"); it != root.end()) {
    if (r.Object(*it, "trend")) {
      r.AllowKeys(*it, "trend", {"policy", "anchor_T"});
      if (auto v = r.Get<std::string>(*it, "trend", "policy")) cfg.trend_policy = *v;
      cfg.trend_anchor = r.Get<Round>(*it, "trend", "anchor_T");
    }
  }
  if (auto it = root.find("output"); it != root.end()) {
    if (r.Object(*it, "output")) {
      r.AllowKeys(*it, "output", {"dir", "per_seed"});
      if (auto v = r.Get<std::string>(*it, "output", "dir")) cfg.output_dir = *v;
      if (auto v = r.Get<bool>(*it, "output", "per_seed")) cfg.per_seed = *v;
    }
  }
  if (auto v = r.Get<int>(root, "", "threads")) cfg.threads = *v;
}

std::vector<Round> SortedHorizons(const std::vector<Round>& horizons) {
  std::vector<Round> out = horizons;
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Round DefaultAnchor(const std::vector<Round>& horizons) {
  const auto sorted = SortedHorizons(horizons);
  return sorted.empty() ? 0 : sorted[sorted.size() / 2];
}

std::string Num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string Field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string FileSafe(const std::string& s) {
  std::string out = s;
  for (char& c : out) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' &&
        c != '.') {
      c = '_';
    }
  }
  return out;
}

// The policy used for the trend curve: explicit, else eps-exp3 when present.
std::optional<std::string> TrendPolicy(const ExperimentConfig& config) {
  const std::string want =
      config.trend_policy.empty() ? "eps-exp3" : config.trend_policy;
  for (const auto& p : config.policies) {
    if (p.label() == want) return p.label();
  }
  return std::nullopt;
}

}  // namespace

double DefaultPMin(int depth) {
  if (depth <= 2) return 0.2;
  if (depth == 3) return 0.4;
  return 0.6;
}

ExperimentConfig ParseConfig(std::string_view json_text,
                             const std::string& base_dir) {
  json root;
  try {
    root = json::parse(json_text.begin(), json_text.end(), nullptr, true,
                       /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  std::vector<std::string> errors;
  Reader reader(errors);
  ExperimentConfig cfg;
  ParseInto(reader, root, base_dir, cfg);
  if (errors.empty()) errors = ValidateConfig(cfg);
  if (!errors.empty()) {
    std::string msg;
    for (const auto& e : errors) msg += (msg.empty() ? "" : "\n") + e;
    throw ConfigError(msg);
  }
  return cfg;
}

std::vector<std::string> ValidateConfig(const ExperimentConfig& config) {
  std::vector<std::string> errors;
  auto error = [&](const std::string& key, const std::string& msg) {
    errors.push_back(key + ": " + msg);
  };

  if (config.scenario.empty()) error("scenario", "missing");

  const TopologyConfig& topo = config.topology;
  if (topo.kind == TopologyConfig::Kind::kUniform) {
    if (topo.fanout < 2) {
      error("topology.D", "must be >= 2 (got " + std::to_string(topo.fanout) + ")");
    }
    if (topo.depth < 1) {
      error("topology.L", "must be >= 1 (got " + std::to_string(topo.depth) + ")");
    }
  } else if (topo.kind == TopologyConfig::Kind::kChain && topo.depth < 2) {
    error("topology.L", "chain needs L >= 2 (got " + std::to_string(topo.depth) + ")");
  }

  std::shared_ptr<const TreeTopology> tree;
  if (errors.empty()) {
    try {
      tree = BuildTopology(topo);
    } catch (const std::exception& e) {
      error("topology", e.what());
    }
  }

  if (config.horizons.empty()) error("horizons", "need at least one T");
  std::set<Round> seen;
  for (std::size_t i = 0; i < config.horizons.size(); ++i) {
    const Round t = config.horizons[i];
    const std::string key = "horizons[" + std::to_string(i) + "]";
    if (t < 1) error(key, "T must be >= 1 (got " + std::to_string(t) + ")");
    if (!seen.insert(t).second) error(key, "duplicate T " + std::to_string(t));
  }
  if (config.seed_count < 1) {
    error("seeds.count", "must be >= 1 (got " + std::to_string(config.seed_count) + ")");
  }
  if (config.threads < 0) error("threads", "must be >= 0");

  // Environment, built at the largest horizon.
  const Round max_t = config.horizons.empty()
                          ? 1
                          : std::max<Round>(1, *std::max_element(
                                                   config.horizons.begin(),
                                                   config.horizons.end()));
  const EnvConfig& env = config.env;
  if (env.kind == EnvConfig::Kind::kBernoulli) {
    if (!(env.shift_fraction >= 0.0 && env.shift_fraction <= 1.0)) {
      error("env.shift_fraction", "must lie in [0,1]");
    }
    if (env.p_min && !(*env.p_min >= 0.0 && *env.p_min <= 1.0)) {
      error("env.p_min", "must lie in [0,1]");
    }
  }
  if (env.kind == EnvConfig::Kind::kLowerBound &&
      topo.kind != TopologyConfig::Kind::kChain) {
    error("env.kind", "lower_bound needs a chain topology");
  }
  std::shared_ptr<const CostEnvironment> built_env;
  if (tree) {
    try {
      built_env = BuildEnvironment(env, *tree, max_t);
    } catch (const std::exception& e) {
      error("env", e.what());
    }
  }
  if (config.expected_regret && built_env && !built_env->has_expected_costs()) {
    error("regret", "'expected' needs an environment with expected costs");
  }

  if (config.policies.empty()) error("policies", "need at least one policy");
  std::set<std::string> labels;
  for (std::size_t i = 0; i < config.policies.size(); ++i) {
    const PolicySpec& p = config.policies[i];
    const std::string key = "policies[" + std::to_string(i) + "]";
    if (!labels.insert(p.label()).second) {
      error(key, "duplicate policy label '" + p.label() + "'");
    }
    if (tree) {
      try {
        BuildPolicies(p, *tree, max_t);
      } catch (const std::exception& e) {
        error(key, e.what());
      }
    }
    if (p.kind == PolicyKind::kOracle && built_env &&
        !built_env->has_expected_costs()) {
      error(key, "oracle needs an environment with expected costs");
    }
  }

  if (config.trace.window < 1) error("trace.window", "must be >= 1");
  if (tree) {
    for (std::size_t i = 0; i < config.trace.watch.size(); ++i) {
      const auto [node, child] = config.trace.watch[i];
      const std::string key = "trace.watch[" + std::to_string(i) + "]";
      if (node < 0 || node >= tree->node_count() || tree->is_leaf(node)) {
        error(key, "node " + std::to_string(node) + " is not a non-leaf node");
      } else if (tree->child_position(node, child) < 0) {
        error(key, std::to_string(child) + " is not a child of " +
                       std::to_string(node));
      }
    }
  }

  if (!config.trend_policy.empty() &&
      std::none_of(config.policies.begin(), config.policies.end(),
                   [&](const PolicySpec& p) {
                     return p.label() == config.trend_policy;
                   })) {
    error("trend.policy", "'" + config.trend_policy + "' is not a configured policy");
  }
  if (config.trend_anchor && !seen.count(*config.trend_anchor)) {
    error("trend.anchor_T", std::to_string(*config.trend_anchor) +
                                " is not in horizons");
  }
  return errors;
}

void CheckConfig(const ExperimentConfig& config) {
  const auto errors = ValidateConfig(config);
  if (errors.empty()) return;
  std::string msg;
  for (const auto& e : errors) msg += (msg.empty() ? "" : "\n") + e;
  throw ConfigError(msg);
}

ExperimentConfig LoadConfig(const std::string& name_or_path) {
  for (const auto& b : BundledConfigs()) {
    if (b.name == name_or_path) return ParseConfig(b.json, ".");
  }
  const fs::path p(name_or_path);
  std::error_code ec;
  if (!fs::is_regular_file(p, ec)) {
    throw ConfigError("'" + name_or_path +
                      "' is neither a bundled scenario nor a readable file");
  }
  const fs::path parent = p.has_parent_path() ? p.parent_path() : fs::path(".");
  return ParseConfig(ReadFile(p), parent.string());
}

std::shared_ptr<const TreeTopology> BuildTopology(const TopologyConfig& config) {
  switch (config.kind) {
    case TopologyConfig::Kind::kUniform:
      return std::make_shared<const TreeTopology>(
          BuildUniformTree(config.fanout, config.depth));
    case TopologyConfig::Kind::kChain:
      return std::make_shared<const TreeTopology>(BuildChainTree(config.depth));
    case TopologyConfig::Kind::kAdjacency:
      return std::make_shared<const TreeTopology>(
          ParseAdjacency(config.adjacency_text));
  }
  throw ConfigError("unknown topology kind");
}

std::shared_ptr<const CostEnvironment> BuildEnvironment(
    const EnvConfig& config, const TreeTopology& tree, Round horizon) {
  switch (config.kind) {
    case EnvConfig::Kind::kBernoulli: {
      std::vector<double> p = config.p;
      if (p.empty()) {
        p = BernoulliLadder(tree.leaf_count(),
                            config.p_min.value_or(DefaultPMin(tree.depth())));
      }
      if (static_cast<int>(p.size()) != tree.leaf_count()) {
        throw ConfigError("p has " + std::to_string(p.size()) +
                          " entries but the topology has " +
                          std::to_string(tree.leaf_count()) + " leaves");
      }
      Round shift = 0;
      if (config.shift_fraction > 0.0) {
        shift = std::max<Round>(
            1, static_cast<Round>(std::floor(config.shift_fraction *
                                             static_cast<double>(horizon))));
      }
      return std::make_shared<const BernoulliTreeEnv>(std::move(p), shift,
                                                      config.shift_leaf);
    }
    case EnvConfig::Kind::kLowerBound: {
      const int L = tree.depth();
      const double delta = config.delta.value_or(std::ldexp(1.0, -(L + 1)));
      auto env = std::make_shared<const LowerBoundChainEnv>(
          MakeLowerBoundEnv(L, delta, config.best_last_leaf));
      if (env->leaf_count() != tree.leaf_count()) {
        throw ConfigError("lower_bound env does not match the topology");
      }
      return env;
    }
    case EnvConfig::Kind::kMec:
      return std::make_shared<const DeadlineLatencyEnv>(
          MakeMecEnv(tree, horizon, config.latency));
    case EnvConfig::Kind::kMultihop:
      return std::make_shared<const DeadlineLatencyEnv>(
          MakeMultihopEnv(tree, horizon, config.latency));
    case EnvConfig::Kind::kCsv: {
      auto env = std::make_shared<const CsvReplayEnv>(
          ParseCostCsv(config.csv_text, tree));
      if (env->rounds() < horizon) {
        throw ConfigError("cost file has " + std::to_string(env->rounds()) +
                          " rounds, fewer than T = " + std::to_string(horizon));
      }
      return env;
    }
  }
  throw ConfigError("unknown environment kind");
}

std::pair<double, double> MeanAndStddev(std::span<const double> values) {
  if (values.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

ExperimentResult RunExperiment(const ExperimentConfig& config) {
  CheckConfig(config);
  const auto tree = BuildTopology(config.topology);
  const auto horizons = SortedHorizons(config.horizons);

  std::vector<std::shared_ptr<const CostEnvironment>> envs;
  for (Round T : horizons) envs.push_back(BuildEnvironment(config.env, *tree, T));

  struct Job {
    int policy;
    int horizon;
    int seed;
  };
  std::vector<Job> jobs;
  for (int p = 0; p < static_cast<int>(config.policies.size()); ++p) {
    for (int h = 0; h < static_cast<int>(horizons.size()); ++h) {
      for (int s = 0; s < config.seed_count; ++s) jobs.push_back({p, h, s});
    }
  }

  std::optional<TraceOptions> trace;
  if (config.trace.enabled) trace = TraceOptions{config.trace.window, config.trace.watch};

  std::vector<RunResult> runs(jobs.size());
  std::vector<std::exception_ptr> failures(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const Job& job = jobs[i];
      RunSpec spec;
      spec.tree = tree;
      spec.env = envs[job.horizon];
      spec.policy = config.policies[job.policy];
      spec.horizon = horizons[job.horizon];
      spec.seed = DeriveSeed(config.master_seed, static_cast<std::uint64_t>(job.seed));
      spec.track_expected = config.expected_regret;
      spec.trace = trace;
      try {
        runs[i] = RunHorizon(spec);
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  int threads = config.threads > 0
                    ? config.threads
                    : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::clamp<int>(threads, 1, static_cast<int>(jobs.size()));
  std::vector<std::thread> pool;
  for (int k = 1; k < threads; ++k) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& f : failures) {
    if (f) std::rethrow_exception(f);
  }

  ExperimentResult result;
  const int D = tree->max_fanout();
  const int L = tree->depth();
  std::size_t i = 0;
  for (int p = 0; p < static_cast<int>(config.policies.size()); ++p) {
    const std::string label = config.policies[p].label();
    for (int h = 0; h < static_cast<int>(horizons.size()); ++h) {
      const Round T = horizons[h];
      std::vector<double> regrets, tavg;
      std::vector<TraceRow> trace_sum;
      for (int s = 0; s < config.seed_count; ++s, ++i) {
        const RegretLedger& ledger = runs[i].ledger;
        SeedResult row;
        row.policy = label;
        row.horizon = T;
        row.seed = s;
        if (config.expected_regret) {
          row.cumulative_cost = ledger.expected_algorithm_cost();
          row.optimal_stationary_cost = ledger.expected_optimal_cost();
          row.regret = ledger.expected_regret();
        } else {
          row.cumulative_cost = ledger.cumulative_algorithm_cost();
          row.optimal_stationary_cost = ledger.optimal_stationary_cost();
          row.regret = ledger.regret();
        }
        regrets.push_back(row.regret);
        tavg.push_back(row.regret / static_cast<double>(T));
        result.per_seed.push_back(row);
        if (trace) {
          if (trace_sum.empty()) {
            trace_sum = runs[i].trace;
          } else {
            for (std::size_t k = 0; k < trace_sum.size(); ++k) {
              trace_sum[k].mean_probability += runs[i].trace[k].mean_probability;
            }
          }
        }
      }
      AggregateResult agg;
      agg.scenario = config.scenario;
      agg.policy = label;
      agg.fanout = D;
      agg.depth = L;
      agg.horizon = T;
      agg.seed_count = config.seed_count;
      agg.mean_regret = MeanAndStddev(regrets).first;
      std::tie(agg.mean_time_avg_regret, agg.stddev) = MeanAndStddev(tavg);
      result.aggregates.push_back(agg);
      if (trace) {
        for (auto& r : trace_sum) r.mean_probability /= config.seed_count;
        result.traces.push_back({label, T, std::move(trace_sum)});
      }
    }
  }
  std::stable_sort(result.aggregates.begin(), result.aggregates.end(),
                   [](const AggregateResult& a, const AggregateResult& b) {
                     return std::tie(a.scenario, a.policy, a.horizon) <
                            std::tie(b.scenario, b.policy, b.horizon);
                   });
  std::stable_sort(result.per_seed.begin(), result.per_seed.end(),
                   [](const SeedResult& a, const SeedResult& b) {
                     return std::tie(a.policy, a.horizon, a.seed) <
                            std::tie(b.policy, b.horizon, b.seed);
                   });
  std::stable_sort(result.traces.begin(), result.traces.end(),
                   [](const TraceSeries& a, const TraceSeries& b) {
                     return std::tie(a.policy, a.horizon) <
                            std::tie(b.policy, b.horizon);
                   });
  return result;
}

std::vector<TrendPoint> AsymptoticTrend(std::span<const AggregateResult> rows,
                                        int depth, Round anchor) {
  if (depth < 1) throw ConfigError("trend needs L >= 1");
  const double exponent = 1.0 / (depth + 1);
  const AggregateResult* at = nullptr;
  for (const auto& r : rows) {
    if (r.horizon == anchor) at = &r;
  }
  if (at == nullptr) {
    throw ConfigError("trend anchor T = " + std::to_string(anchor) +
                      " is not among the results");
  }
  const double R = at->mean_time_avg_regret *
                   std::pow(static_cast<double>(anchor), exponent);
  std::vector<TrendPoint> out;
  for (const auto& r : rows) {
    TrendPoint p;
    p.horizon = r.horizon;
    p.measured = r.mean_time_avg_regret;
    p.trend = r.horizon == anchor
                  ? r.mean_time_avg_regret
                  : R / std::pow(static_cast<double>(r.horizon), exponent);
    out.push_back(p);
  }
  return out;
}

SlopeFit FitLogLogSlope(std::span<const std::pair<double, double>> points) {
  if (points.size() < 3) {
    throw std::invalid_argument("slope fit needs at least 3 points");
  }
  SlopeFit fit;
  std::vector<double> xs, ys;
  for (const auto& [t, regret] : points) {
    if (!(t > 0.0) || !std::isfinite(t) || std::isnan(regret)) {
      throw std::invalid_argument("slope fit needs positive, finite T values");
    }
    double r = regret;
    if (r <= kSlopeFloor) {
      r = kSlopeFloor;
      ++fit.floored_points;
    }
    xs.push_back(std::log(t));
    ys.push_back(std::log(r));
  }
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx == 0.0) throw std::invalid_argument("slope fit needs distinct T values");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

std::string ResultsCsv(std::span<const AggregateResult> rows) {
  std::string out =
      "scenario,policy,D,L,T,seed_count,mean_time_avg_regret,stddev\n";
  for (const auto& r : rows) {
    out += Field(r.scenario) + "," + Field(r.policy) + "," +
           std::to_string(r.fanout) + "," + std::to_string(r.depth) + "," +
           std::to_string(r.horizon) + "," + std::to_string(r.seed_count) +
           "," + Num(r.mean_time_avg_regret) + "," + Num(r.stddev) + "\n";
  }
  return out;
}

std::string PerSeedCsv(const std::string& scenario,
                       std::span<const SeedResult> rows) {
  std::string out =
      "scenario,policy,T,seed,cumulative_cost,optimal_stationary_cost,regret\n";
  for (const auto& r : rows) {
    out += Field(scenario) + "," + Field(r.policy) + "," +
           std::to_string(r.horizon) + "," + std::to_string(r.seed) + "," +
           Num(r.cumulative_cost) + "," + Num(r.optimal_stationary_cost) +
           "," + Num(r.regret) + "\n";
  }
  return out;
}

std::string TraceCsv(std::span<const TraceRow> rows) {
  std::string out = "round_window_end,node_id,child_id,mean_selection_probability\n";
  for (const auto& r : rows) {
    out += std::to_string(r.window_end) + "," + std::to_string(r.node) + "," +
           std::to_string(r.child) + "," + Num(r.mean_probability) + "\n";
  }
  return out;
}

std::string TrendCsv(const ExperimentConfig& config,
                     const ExperimentResult& result) {
  std::string out = "scenario,policy,D,L,T,measured_time_avg_regret,trend\n";
  const auto policy = TrendPolicy(config);
  if (!policy) return out;
  std::vector<AggregateResult> rows;
  for (const auto& r : result.aggregates) {
    if (r.policy == *policy) rows.push_back(r);
  }
  if (rows.empty()) return out;
  const Round anchor = config.trend_anchor.value_or(DefaultAnchor(config.horizons));
  for (const auto& p : AsymptoticTrend(rows, rows.front().depth, anchor)) {
    out += Field(config.scenario) + "," + Field(*policy) + "," +
           std::to_string(rows.front().fanout) + "," +
           std::to_string(rows.front().depth) + "," + std::to_string(p.horizon) +
           "," + Num(p.measured) + "," + Num(p.trend) + "\n";
  }
  return out;
}

std::string SlopesCsv(const ExperimentConfig& config,
                      const ExperimentResult& result) {
  std::string out = "scenario,policy,D,L,slope,points,floored_points\n";
  std::map<std::string, std::vector<const AggregateResult*>> by_policy;
  for (const auto& r : result.aggregates) by_policy[r.policy].push_back(&r);
  for (const auto& [policy, rows] : by_policy) {
    if (rows.size() < 3) continue;
    std::vector<std::pair<double, double>> pts;
    for (const auto* r : rows) {
      pts.emplace_back(static_cast<double>(r->horizon), r->mean_regret);
    }
    const SlopeFit fit = FitLogLogSlope(pts);
    out += Field(config.scenario) + "," + Field(policy) + "," +
           std::to_string(rows.front()->fanout) + "," +
           std::to_string(rows.front()->depth) + "," + Num(fit.slope) + "," +
           std::to_string(pts.size()) + "," +
           std::to_string(fit.floored_points) + "\n";
  }
  return out;
}

std::vector<std::string> WriteOutputs(const ExperimentConfig& config,
                                      const ExperimentResult& result,
                                      const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + dir + ": " + ec.message());
  std::vector<std::string> written;
  auto write = [&](const std::string& name, const std::string& text) {
    const fs::path p = fs::path(dir) / name;
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) throw std::runtime_error("failed writing " + p.string());
    written.push_back(p.string());
  };
  write("results.csv", ResultsCsv(result.aggregates));
  write("trend.csv", TrendCsv(config, result));
  write("slopes.csv", SlopesCsv(config, result));
  if (config.per_seed) write("per_seed.csv", PerSeedCsv(config.scenario, result.per_seed));
  for (const auto& t : result.traces) {
    write("trace_" + FileSafe(t.policy) + "_T" + std::to_string(t.horizon) + ".csv",
          TraceCsv(t.rows));
  }
  return written;
}

}  // namespace mstage
