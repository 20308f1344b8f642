#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mstage/engine.h"
#include "mstage/env.h"
#include "mstage/policy.h"
#include "mstage/topology.h"

namespace mstage {

inline constexpr std::uint64_t kDefaultMasterSeed = 20240521;

struct TopologyConfig {
  enum class Kind { kUniform, kChain, kAdjacency };
  Kind kind = Kind::kUniform;
  int fanout = 2;  // D, uniform only
  int depth = 2;   // L, uniform and chain
  std::string adjacency_text;
};

struct EnvConfig {
  enum class Kind { kBernoulli, kLowerBound, kMec, kMultihop, kCsv };
  Kind kind = Kind::kBernoulli;
  // bernoulli
  std::optional<double> p_min;  // ladder; default by depth
  std::vector<double> p;        // explicit means, overrides the ladder
  double shift_fraction = 0.01; // 0 disables the shift
  int shift_leaf = 0;
  // lower_bound
  std::optional<double> delta;  // default 2^-(L+1)
  bool best_last_leaf = false;
  // mec / multihop
  LatencyScenarioOptions latency;
  // csv
  std::string csv_text;
};

struct TraceConfig {
  bool enabled = false;
  Round window = 1000;
  std::vector<std::pair<NodeId, NodeId>> watch;
};

struct ExperimentConfig {
  std::string scenario;
  std::string description;
  TopologyConfig topology;
  EnvConfig env;
  std::vector<PolicySpec> policies;
  std::vector<Round> horizons;
  int seed_count = 20;
  std::uint64_t master_seed = kDefaultMasterSeed;
  bool expected_regret = false;
  TraceConfig trace;
  std::optional<Round> trend_anchor;  // default: middle of the sorted grid
  std::string trend_policy;           // empty: eps-exp3 when present
  std::string output_dir;             // default: results/<scenario>
  bool per_seed = false;
  int threads = 0;                    // 0: hardware concurrency
};

// Default p_min for the Bernoulli ladder: 0.2, 0.4, 0.6 for L = 2, 3, 4.
double DefaultPMin(int depth);

// Parses JSON config text. Relative file references (adjacency, csv) resolve
// against `base_dir`. Every problem found is reported, one per line, in a
// single ConfigError; semantic checks from ValidateConfig are included.
ExperimentConfig ParseConfig(std::string_view json_text,
                             const std::string& base_dir = ".");

// Semantic checks; returns one message per problem, each naming its key.
std::vector<std::string> ValidateConfig(const ExperimentConfig& config);

// Throws ConfigError listing every ValidateConfig message.
void CheckConfig(const ExperimentConfig& config);

struct BundledConfig {
  std::string_view name;
  std::string_view json;
};

std::span<const BundledConfig> BundledConfigs();

// Bundled name or path to a JSON file.
ExperimentConfig LoadConfig(const std::string& name_or_path);

std::shared_ptr<const TreeTopology> BuildTopology(const TopologyConfig& config);
std::shared_ptr<const CostEnvironment> BuildEnvironment(
    const EnvConfig& config, const TreeTopology& tree, Round horizon);

struct AggregateResult {
  std::string scenario;
  std::string policy;
  int fanout = 0;  // D
  int depth = 0;   // L
  Round horizon = 0;
  int seed_count = 0;
  double mean_regret = 0.0;
  double mean_time_avg_regret = 0.0;
  double stddev = 0.0;  // sample stddev of the time-average regret
};

struct SeedResult {
  std::string policy;
  Round horizon = 0;
  int seed = 0;
  double cumulative_cost = 0.0;
  double optimal_stationary_cost = 0.0;
  double regret = 0.0;
};

struct TraceSeries {
  std::string policy;
  Round horizon = 0;
  std::vector<TraceRow> rows;  // averaged over seeds
};

struct ExperimentResult {
  std::vector<AggregateResult> aggregates;  // sorted (scenario, policy, T)
  std::vector<SeedResult> per_seed;         // sorted (policy, T, seed)
  std::vector<TraceSeries> traces;
};

// Mean and sample (n-1) standard deviation; stddev is 0 for n < 2.
std::pair<double, double> MeanAndStddev(std::span<const double> values);

// Fresh engine run for every (policy, T, seed), spread over a worker pool;
// results are keyed, never ordered by completion. Seed s of every policy and
// horizon shares the stream DeriveSeed(master_seed, s).
ExperimentResult RunExperiment(const ExperimentConfig& config);

struct TrendPoint {
  Round horizon = 0;
  double measured = 0.0;
  double trend = 0.0;
};

// R / T^(1/(L+1)) with R chosen so the curve meets the measured time-average
// regret at `anchor`. `rows` should hold one policy at one (D, L). Throws
// ConfigError when the anchor is not among the rows.
std::vector<TrendPoint> AsymptoticTrend(std::span<const AggregateResult> rows,
                                        int depth, Round anchor);

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  int floored_points = 0;  // regret values raised to kSlopeFloor
};

inline constexpr double kSlopeFloor = 1e-9;

// OLS slope of log(regret) against log(T). Needs at least 3 points and
// positive T; regret <= kSlopeFloor is floored and counted.
SlopeFit FitLogLogSlope(std::span<const std::pair<double, double>> points);

// CSV renderings; numbers use %.12g so output is byte-stable.
std::string ResultsCsv(std::span<const AggregateResult> rows);
std::string PerSeedCsv(const std::string& scenario,
                       std::span<const SeedResult> rows);
std::string TraceCsv(std::span<const TraceRow> rows);
std::string TrendCsv(const ExperimentConfig& config,
                     const ExperimentResult& result);
std::string SlopesCsv(const ExperimentConfig& config,
                      const ExperimentResult& result);

// Writes results.csv, trend.csv, slopes.csv, per_seed.csv (when enabled) and
// trace_<policy>_T<T>.csv files into `dir`. Returns the paths written.
std::vector<std::string> WriteOutputs(const ExperimentConfig& config,
                                      const ExperimentResult& result,
                                      const std::string& dir);

}  // namespace mstage
