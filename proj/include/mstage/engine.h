#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mstage/env.h"
#include "mstage/policy.h"
#include "mstage/topology.h"

namespace mstage {

enum class FeedbackModel {
  // Every non-leaf node sees y[j, t] for all of its children every round.
  kCompleteOneHop,
  // Only nodes on the job's path see the single realized leaf cost.
  kEndToEndBandit,
};

// Feedback model a policy kind runs under.
FeedbackModel FeedbackFor(PolicyKind kind);

struct RoundOutcome {
  std::vector<NodeId> path;            // root -> leaf
  double realized_cost = 0.0;
  std::vector<double> v_along_path;    // receive probability per path node
  std::vector<ModeDraw> modes;         // one per non-leaf path node
};

// Cumulative algorithm cost against the cumulative cost of every fixed leaf,
// over the same realized cost draws. Optionally also tracks the expected
// (pseudo) version: sum_t w[root, t] against min_j sum_t E[c[j, t]].
class RegretLedger {
 public:
  explicit RegretLedger(int leaf_count = 0);

  void Record(double realized_cost, std::span<const double> leaf_costs);
  void RecordExpected(double expected_cost,
                      std::span<const double> expected_leaf_costs);

  Round rounds_elapsed() const { return rounds_; }
  double cumulative_algorithm_cost() const { return algorithm_cost_; }
  const std::vector<double>& cumulative_leaf_costs() const { return leaf_costs_; }
  // min_j sum_t c[j, t]; 0 before the first round.
  double optimal_stationary_cost() const;
  double regret() const { return algorithm_cost_ - optimal_stationary_cost(); }
  // regret / T, and 0 for an empty horizon.
  double time_average_regret() const;

  bool has_expected() const { return expected_rounds_ > 0; }
  double expected_algorithm_cost() const { return expected_algorithm_cost_; }
  double expected_optimal_cost() const;
  double expected_regret() const;

 private:
  Round rounds_ = 0;
  double algorithm_cost_ = 0.0;
  std::vector<double> leaf_costs_;
  Round expected_rounds_ = 0;
  double expected_algorithm_cost_ = 0.0;
  std::vector<double> expected_leaf_costs_;
};

// Randomness for one run: a per-node learner stream derived from
// (seed, node id) and a per-round environment stream keyed by (seed, t).
class RunStreams {
 public:
  RunStreams(std::uint64_t seed, int node_count);

  NodeRng& node(NodeId n) { return nodes_[n]; }
  EnvRng ForRound(Round t) const;
  // Reused per-round cost buffer.
  std::vector<double>& costs() { return costs_; }

 private:
  std::uint64_t env_seed_;
  std::vector<NodeRng> nodes_;
  std::vector<double> costs_;
};

// Conditional expected cost w[n, t] for every node given the current
// policies: w[leaf] = E[c[leaf, t]], w[i] = sum_j x[i, j, t] w[j, t]. Oracle
// policies receive their children's w before their own x is read. Throws
// ConfigError when the environment has no expected costs.
std::vector<double> ConditionalExpectedCosts(const TreeTopology& tree,
                                             PolicySet& policies,
                                             const CostEnvironment& env,
                                             Round t);

double ConditionalExpectedCost(const TreeTopology& tree, PolicySet& policies,
                               const CostEnvironment& env, NodeId node, Round t);

// One round: draws c[., t] once, routes the job (or, under complete one-hop
// feedback, has every node draw), applies feedback, and charges the ledger.
// `expected` optionally carries this round's w vector (from
// ConditionalExpectedCosts, computed before any selection) for oracle inputs
// and pseudo-regret tracking.
RoundOutcome RunRound(const TreeTopology& tree, PolicySet& policies,
                      const CostEnvironment& env, FeedbackModel model, Round t,
                      RunStreams& streams, RegretLedger& ledger,
                      const std::vector<double>* expected = nullptr);

struct TraceRow {
  Round window_end = 0;
  NodeId node = 0;
  NodeId child = 0;
  double mean_probability = 0.0;
};

struct TraceOptions {
  Round window = 1000;
  std::vector<std::pair<NodeId, NodeId>> watch;  // (node id, child node id)
};

// A single run bound to its topology, policies, environment and seed.
class Simulation {
 public:
  Simulation(std::shared_ptr<const TreeTopology> tree, PolicySet policies,
             std::shared_ptr<const CostEnvironment> env, FeedbackModel model,
             std::uint64_t seed, bool track_expected = false);

  // Runs round t = rounds_elapsed() + 1.
  RoundOutcome Step();

  // Windowed average of x[node, child] over each block of `window` rounds;
  // a trailing partial window is flushed by FlushTrace().
  void EnableTrace(TraceOptions options);
  void FlushTrace();
  const std::vector<TraceRow>& trace() const { return trace_rows_; }

  const RegretLedger& ledger() const { return ledger_; }
  const TreeTopology& tree() const { return *tree_; }
  NodePolicy& policy(NodeId n) { return *policies_.at(n); }
  PolicySet& policies() { return policies_; }
  Round next_round() const { return ledger_.rounds_elapsed() + 1; }

 private:
  std::shared_ptr<const TreeTopology> tree_;
  PolicySet policies_;
  std::shared_ptr<const CostEnvironment> env_;
  FeedbackModel model_;
  RunStreams streams_;
  RegretLedger ledger_;
  bool track_expected_;
  bool needs_round_start_ = false;
  bool needs_expectations_ = false;

  std::optional<TraceOptions> trace_;
  std::vector<std::pair<NodeId, int>> trace_positions_;
  std::vector<double> trace_sums_;
  Round trace_count_ = 0;
  std::vector<TraceRow> trace_rows_;
};

struct RunSpec {
  std::shared_ptr<const TreeTopology> tree;
  std::shared_ptr<const CostEnvironment> env;
  PolicySpec policy;
  Round horizon = 0;
  std::uint64_t seed = 0;
  bool track_expected = false;
  std::optional<TraceOptions> trace;
};

struct RunResult {
  RegretLedger ledger;
  std::vector<TraceRow> trace;
};

// Rounds 1..horizon of a fresh simulation; horizon 0 gives an empty ledger.
RunResult RunHorizon(const RunSpec& spec);

}  // namespace mstage
