#include "mstage/engine.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "mstage/errors.h"

namespace mstage {
namespace {

constexpr std::uint64_t kEnvStream = 0x656e7669726f6eULL;
constexpr std::uint64_t kNodeStream = 0x6e6f6465ULL;

void CheckLeafCosts(std::span<const double> costs, Round t) {
  for (std::size_t j = 0; j < costs.size(); ++j) {
    const double c = costs[j];
    if (!(c >= 0.0 && c <= 1.0)) {
      throw NumericalError("leaf cost outside [0,1] at round " +
                           std::to_string(t) + ", leaf position " +
                           std::to_string(j));
    }
  }
}

}  // namespace

FeedbackModel FeedbackFor(PolicyKind kind) {
  return kind == PolicyKind::kNormalizedEg ? FeedbackModel::kCompleteOneHop
                                           : FeedbackModel::kEndToEndBandit;
}

// -- RegretLedger ---------------------------------------------------------------

RegretLedger::RegretLedger(int leaf_count)
    : leaf_costs_(leaf_count, 0.0), expected_leaf_costs_(leaf_count, 0.0) {}

void RegretLedger::Record(double realized_cost,
                          std::span<const double> leaf_costs) {
  if (leaf_costs.size() != leaf_costs_.size()) {
    throw std::invalid_argument("ledger: leaf cost vector has wrong size");
  }
  ++rounds_;
  algorithm_cost_ += realized_cost;
  for (std::size_t j = 0; j < leaf_costs.size(); ++j) {
    leaf_costs_[j] += leaf_costs[j];
  }
}

void RegretLedger::RecordExpected(double expected_cost,
                                  std::span<const double> expected_leaf_costs) {
  if (expected_leaf_costs.size() != expected_leaf_costs_.size()) {
    throw std::invalid_argument("ledger: expected cost vector has wrong size");
  }
  ++expected_rounds_;
  expected_algorithm_cost_ += expected_cost;
  for (std::size_t j = 0; j < expected_leaf_costs.size(); ++j) {
    expected_leaf_costs_[j] += expected_leaf_costs[j];
  }
}

double RegretLedger::optimal_stationary_cost() const {
  if (rounds_ == 0 || leaf_costs_.empty()) return 0.0;
  return *std::min_element(leaf_costs_.begin(), leaf_costs_.end());
}

double RegretLedger::time_average_regret() const {
  if (rounds_ == 0) return 0.0;
  return regret() / static_cast<double>(rounds_);
}

double RegretLedger::expected_optimal_cost() const {
  if (expected_rounds_ == 0 || expected_leaf_costs_.empty()) return 0.0;
  return *std::min_element(expected_leaf_costs_.begin(),
                           expected_leaf_costs_.end());
}

double RegretLedger::expected_regret() const {
  return expected_algorithm_cost_ - expected_optimal_cost();
}

// -- RunStreams ---------------------------------------------------------------------

RunStreams::RunStreams(std::uint64_t seed, int node_count)
    : env_seed_(DeriveSeed(seed, kEnvStream)) {
  nodes_.reserve(node_count);
  for (int n = 0; n < node_count; ++n) {
    nodes_.emplace_back(DeriveSeed(seed, kNodeStream, n));
  }
}

EnvRng RunStreams::ForRound(Round t) const {
  return EnvRng(DeriveSeed(env_seed_, static_cast<std::uint64_t>(t)));
}

// -- Expected costs -----------------------------------------------------------------

std::vector<double> ConditionalExpectedCosts(const TreeTopology& tree,
                                             PolicySet& policies,
                                             const CostEnvironment& env,
                                             Round t) {
  if (!env.has_expected_costs()) {
    throw ConfigError("environment does not provide expected costs");
  }
  std::vector<double> leaf_means(tree.leaf_count());
  env.ExpectedCosts(t, leaf_means);

  std::vector<double> w(tree.node_count(), 0.0);
  std::vector<double> child_w;
  for (NodeId n : tree.bottom_up_order()) {
    if (tree.is_leaf(n)) {
      w[n] = leaf_means[tree.leaf_index(n)];
      continue;
    }
    const auto& kids = tree.children(n);
    NodePolicy& policy = *policies[n];
    if (policy.wants_child_expectations()) {
      child_w.resize(kids.size());
      for (std::size_t k = 0; k < kids.size(); ++k) child_w[k] = w[kids[k]];
      policy.SetChildExpectations(child_w);
    }
    const auto x = policy.Distribution();
    double sum = 0.0;
    for (std::size_t k = 0; k < kids.size(); ++k) sum += x[k] * w[kids[k]];
    w[n] = sum;
  }
  return w;
}

double ConditionalExpectedCost(const TreeTopology& tree, PolicySet& policies,
                               const CostEnvironment& env, NodeId node,
                               Round t) {
  return ConditionalExpectedCosts(tree, policies, env, t).at(node);
}

// -- Rounds ---------------------------------------------------------------------------

RoundOutcome RunRound(const TreeTopology& tree, PolicySet& policies,
                      const CostEnvironment& env, FeedbackModel model, Round t,
                      RunStreams& streams, RegretLedger& ledger,
                      const std::vector<double>* expected) {
  if (static_cast<int>(policies.size()) != tree.node_count()) {
    throw ConfigError("policy set does not match the topology");
  }
  std::vector<double>& costs = streams.costs();
  costs.resize(tree.leaf_count());
  EnvRng env_rng = streams.ForRound(t);
  env.Costs(t, env_rng, costs);
  CheckLeafCosts(costs, t);

  RoundOutcome out;
  if (model == FeedbackModel::kEndToEndBandit) {
    NodeId node = 0;
    double v = 1.0;
    while (!tree.is_leaf(node)) {
      if (!policies[node]) {
        throw ConfigError("missing policy for node " + std::to_string(node));
      }
      NodePolicy& policy = *policies[node];
      const ModeDraw draw = policy.Select(streams.node(node));
      out.path.push_back(node);
      out.v_along_path.push_back(v);
      out.modes.push_back(draw);
      v *= policy.Distribution()[draw.child];
      node = tree.children(node)[draw.child];
    }
    out.path.push_back(node);
    out.v_along_path.push_back(v);
    out.realized_cost = costs[tree.leaf_index(node)];
    for (std::size_t k = 0; k < out.modes.size(); ++k) {
      policies[out.path[k]]->ObserveBandit(out.modes[k], out.realized_cost,
                                           out.v_along_path[k]);
    }
  } else {
    const int n_nodes = tree.node_count();
    std::vector<ModeDraw> draws(n_nodes);
    for (NodeId n = 0; n < n_nodes; ++n) {
      if (tree.is_leaf(n)) continue;
      if (!policies[n]) {
        throw ConfigError("missing policy for node " + std::to_string(n));
      }
      draws[n] = policies[n]->Select(streams.node(n));
    }
    std::vector<double> y(n_nodes, 0.0);
    for (NodeId n : tree.bottom_up_order()) {
      y[n] = tree.is_leaf(n) ? costs[tree.leaf_index(n)]
                             : y[tree.children(n)[draws[n].child]];
    }
    NodeId node = 0;
    double v = 1.0;
    while (!tree.is_leaf(node)) {
      out.path.push_back(node);
      out.v_along_path.push_back(v);
      out.modes.push_back(draws[node]);
      v *= policies[node]->Distribution()[draws[node].child];
      node = tree.children(node)[draws[node].child];
    }
    out.path.push_back(node);
    out.v_along_path.push_back(v);
    out.realized_cost = y[0];
    std::vector<double> child_y;
    for (NodeId n = 0; n < n_nodes; ++n) {
      if (tree.is_leaf(n)) continue;
      const auto& kids = tree.children(n);
      child_y.resize(kids.size());
      for (std::size_t k = 0; k < kids.size(); ++k) child_y[k] = y[kids[k]];
      policies[n]->ObserveFull(child_y);
    }
  }

  ledger.Record(out.realized_cost, costs);
  if (expected != nullptr) {
    std::vector<double> leaf_w(tree.leaf_count());
    for (int j = 0; j < tree.leaf_count(); ++j) {
      leaf_w[j] = (*expected)[tree.leaves()[j]];
    }
    ledger.RecordExpected((*expected)[0], leaf_w);
  }
  return out;
}

// -- Simulation -----------------------------------------------------------------------

Simulation::Simulation(std::shared_ptr<const TreeTopology> tree,
                       PolicySet policies,
                       std::shared_ptr<const CostEnvironment> env,
                       FeedbackModel model, std::uint64_t seed,
                       bool track_expected)
    : tree_(std::move(tree)),
      policies_(std::move(policies)),
      env_(std::move(env)),
      model_(model),
      streams_(seed, tree_->node_count()),
      ledger_(tree_->leaf_count()),
      track_expected_(track_expected) {
  if (static_cast<int>(policies_.size()) != tree_->node_count()) {
    throw ConfigError("policy set does not match the topology");
  }
  if (env_->leaf_count() != tree_->leaf_count()) {
    throw ConfigError("environment has " + std::to_string(env_->leaf_count()) +
                      " leaves but the topology has " +
                      std::to_string(tree_->leaf_count()));
  }
  for (NodeId n = 0; n < tree_->node_count(); ++n) {
    if (tree_->is_leaf(n)) continue;
    const NodePolicy* p = policies_[n].get();
    if (p == nullptr) throw ConfigError("missing policy for node " + std::to_string(n));
    if (p->fanout() != static_cast<int>(tree_->children(n).size())) {
      throw ConfigError("policy fanout mismatch at node " + std::to_string(n));
    }
    needs_round_start_ |= p->wants_round_start();
    needs_expectations_ |= p->wants_child_expectations();
  }
  if ((track_expected_ || needs_expectations_) && !env_->has_expected_costs()) {
    throw ConfigError("environment does not provide expected costs");
  }
}

void Simulation::EnableTrace(TraceOptions options) {
  if (options.window < 1) throw ConfigError("trace.window must be >= 1");
  trace_positions_.clear();
  for (const auto& [node, child] : options.watch) {
    if (node < 0 || node >= tree_->node_count() || tree_->is_leaf(node)) {
      throw ConfigError("trace.watch: node " + std::to_string(node) +
                        " is not a non-leaf node");
    }
    const int pos = tree_->child_position(node, child);
    if (pos < 0) {
      throw ConfigError("trace.watch: " + std::to_string(child) +
                        " is not a child of " + std::to_string(node));
    }
    trace_positions_.emplace_back(node, pos);
  }
  trace_sums_.assign(trace_positions_.size(), 0.0);
  trace_count_ = 0;
  trace_rows_.clear();
  trace_ = std::move(options);
}

void Simulation::FlushTrace() {
  if (!trace_ || trace_count_ == 0) return;
  const Round end = ledger_.rounds_elapsed();
  for (std::size_t k = 0; k < trace_positions_.size(); ++k) {
    trace_rows_.push_back({end, trace_->watch[k].first, trace_->watch[k].second,
                           trace_sums_[k] / static_cast<double>(trace_count_)});
    trace_sums_[k] = 0.0;
  }
  trace_count_ = 0;
}

RoundOutcome Simulation::Step() {
  const Round t = next_round();
  if (needs_round_start_) {
    for (auto& p : policies_) {
      if (p) p->BeginRound(t);
    }
  }
  std::vector<double> w;
  if (track_expected_ || needs_expectations_) {
    w = ConditionalExpectedCosts(*tree_, policies_, *env_, t);
  }
  if (trace_) {
    for (std::size_t k = 0; k < trace_positions_.size(); ++k) {
      const auto [node, pos] = trace_positions_[k];
      trace_sums_[k] += policies_[node]->Distribution()[pos];
    }
    ++trace_count_;
  }
  RoundOutcome out = RunRound(*tree_, policies_, *env_, model_, t, streams_,
                              ledger_, track_expected_ ? &w : nullptr);
  if (trace_ && trace_count_ == trace_->window) FlushTrace();
  return out;
}

RunResult RunHorizon(const RunSpec& spec) {
  if (!spec.tree || !spec.env) throw ConfigError("run needs a topology and environment");
  if (spec.horizon < 0) throw ConfigError("horizon must be >= 0");
  if (spec.horizon == 0) return {RegretLedger(spec.tree->leaf_count()), {}};
  Simulation sim(spec.tree, BuildPolicies(spec.policy, *spec.tree, spec.horizon),
                 spec.env, FeedbackFor(spec.policy.kind), spec.seed,
                 spec.track_expected);
  if (spec.trace) sim.EnableTrace(*spec.trace);
  for (Round t = 1; t <= spec.horizon; ++t) sim.Step();
  sim.FlushTrace();
  return {sim.ledger(), sim.trace()};
}

}  // namespace mstage
