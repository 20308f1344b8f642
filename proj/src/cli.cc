#include "mstage/cli.h"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <optional>

#include <CLI11.hpp>

#include "mstage/errors.h"
#include "mstage/harness.h"

namespace mstage {
namespace {

struct Overrides {
  std::vector<long long> horizons;
  std::optional<int> seeds;
  std::vector<std::string> policies;
  std::optional<std::string> scenario;
  std::optional<std::string> out;
  std::optional<std::uint64_t> master_seed;
  std::optional<long long> trace_window;
  std::optional<int> threads;
};

void AddOverrideFlags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--t", o.horizons, "Horizon grid, replaces the config's")
      ->delimiter(',');
  cmd->add_option("--seeds", o.seeds, "Replications per (policy, T)");
  cmd->add_option("--policy", o.policies, "Policies to run, replaces the config's")
      ->delimiter(',');
  cmd->add_option("--scenario", o.scenario, "Scenario id written to outputs");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--master-seed", o.master_seed, "Master seed");
  cmd->add_option("--trace-window", o.trace_window, "Trace window length W");
  cmd->add_option("--threads", o.threads, "Worker threads (0: all cores)");
}

void Apply(const Overrides& o, ExperimentConfig& cfg) {
  if (!o.horizons.empty()) {
    cfg.horizons.assign(o.horizons.begin(), o.horizons.end());
    if (cfg.trend_anchor &&
        std::find(cfg.horizons.begin(), cfg.horizons.end(), *cfg.trend_anchor) ==
            cfg.horizons.end()) {
      cfg.trend_anchor.reset();
    }
  }
  if (o.seeds) cfg.seed_count = *o.seeds;
  if (!o.policies.empty()) {
    std::vector<PolicySpec> specs;
    for (const auto& name : o.policies) {
      // Keep configured overrides when the policy is already listed.
      auto it = std::find_if(cfg.policies.begin(), cfg.policies.end(),
                             [&](const PolicySpec& p) { return p.label() == name; });
      if (it != cfg.policies.end()) {
        specs.push_back(*it);
        continue;
      }
      auto kind = ParsePolicyKind(name);
      if (!kind) throw ConfigError("--policy: unknown policy '" + name + "'");
      PolicySpec spec;
      spec.kind = *kind;
      specs.push_back(spec);
    }
    cfg.policies = std::move(specs);
    if (!cfg.trend_policy.empty() &&
        std::none_of(cfg.policies.begin(), cfg.policies.end(),
                     [&](const PolicySpec& p) { return p.label() == cfg.trend_policy; })) {
      cfg.trend_policy.clear();
    }
  }
  if (o.scenario) cfg.scenario = *o.scenario;
  if (o.master_seed) cfg.master_seed = *o.master_seed;
  if (o.trace_window) cfg.trace.window = *o.trace_window;
  if (o.threads) cfg.threads = *o.threads;
}

ExperimentConfig Load(const std::string& source, const Overrides& o) {
  ExperimentConfig cfg = LoadConfig(source);
  Apply(o, cfg);
  CheckConfig(cfg);
  return cfg;
}

std::string OutputDir(const ExperimentConfig& cfg, const Overrides& o) {
  if (o.out) return *o.out;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return "results/" + cfg.scenario;
}

int Run(ExperimentConfig cfg, const Overrides& o, std::ostream& out,
        std::ostream& err) {
  const ExperimentResult result = RunExperiment(cfg);
  for (const auto& r : result.aggregates) {
    char line[256];
    std::snprintf(line, sizeof line,
                  "%s %s T=%lld seeds=%d time-avg regret %.6g (sd %.3g)",
                  r.scenario.c_str(), r.policy.c_str(), r.horizon, r.seed_count,
                  r.mean_time_avg_regret, r.stddev);
    err << line << "\n";
  }
  const std::string dir = OutputDir(cfg, o);
  const auto written = WriteOutputs(cfg, result, dir);
  for (const auto& path : written) out << path << "\n";
  return 0;
}

}  // namespace

int RunCli(const std::vector<std::string>& args, std::ostream& out,
           std::ostream& err) {
  CLI::App app{"Multi-stage online learning simulator"};
  app.name("mstage");
  app.require_subcommand(1);

  std::string source;
  Overrides overrides;

  CLI::App* run = app.add_subcommand("run", "Run an experiment config");
  run->add_option("config", source, "Bundled scenario name or config path")
      ->required();
  AddOverrideFlags(run, overrides);

  CLI::App* trace = app.add_subcommand(
      "trace", "Run with windowed selection-probability traces enabled");
  trace->add_option("config", source, "Bundled scenario name or config path")
      ->required();
  AddOverrideFlags(trace, overrides);

  CLI::App* validate = app.add_subcommand("validate", "Check a config without running");
  validate->add_option("config", source, "Bundled scenario name or config path")
      ->required();
  AddOverrideFlags(validate, overrides);

  CLI::App* scenarios = app.add_subcommand("scenarios", "List bundled configs");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    if (scenarios->parsed()) {
      for (const auto& b : BundledConfigs()) {
        const ExperimentConfig cfg = ParseConfig(b.json);
        out << b.name << "\t" << cfg.description << "\n";
      }
      return 0;
    }
    if (validate->parsed()) {
      const ExperimentConfig cfg = Load(source, overrides);
      out << "ok: " << cfg.scenario << " (" << cfg.policies.size()
          << " policies, " << cfg.horizons.size() << " horizons, "
          << cfg.seed_count << " seeds)\n";
      return 0;
    }
    ExperimentConfig cfg = Load(source, overrides);
    if (trace->parsed()) {
      cfg.trace.enabled = true;
      if (cfg.trace.watch.empty()) {
        const auto tree = BuildTopology(cfg.topology);
        for (NodeId c : tree->children(0)) cfg.trace.watch.emplace_back(0, c);
      }
    }
    return Run(std::move(cfg), overrides, out, err);
  } catch (const ConfigError& e) {
    err << "config error:\n" << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "run failed: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace mstage
