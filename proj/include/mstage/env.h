#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mstage/rng.h"
#include "mstage/topology.h"

namespace mstage {

// Round index, 1-based.
using Round = long long;

// Oblivious adversary producing the leaf cost vector c[., t] in [0,1]. The
// full vector is visible to the regret ledger; policies only ever see the
// cost of the leaf the job actually reached. Implementations are immutable
// after construction, so one instance may serve concurrent runs.
class CostEnvironment {
 public:
  virtual ~CostEnvironment() = default;

  virtual int leaf_count() const = 0;

  // Writes c[j, t] for every leaf position j. Deterministic in (rng state, t).
  virtual void Costs(Round t, EnvRng& rng, std::span<double> out) const = 0;

  virtual bool has_expected_costs() const { return false; }
  // E[c[j, t]] for every leaf. Throws std::logic_error when unsupported.
  virtual void ExpectedCosts(Round t, std::span<double> out) const;

  std::vector<double> Costs(Round t, EnvRng& rng) const;
  std::vector<double> ExpectedCosts(Round t) const;
};

// Leaf j costs 1 with probability p_j, else 0. At `shift_round` (if > 0) the
// mean of `shift_leaf` drops to 0 for the rest of the run.
class BernoulliTreeEnv final : public CostEnvironment {
 public:
  using CostEnvironment::Costs;
  using CostEnvironment::ExpectedCosts;
  BernoulliTreeEnv(std::vector<double> p, Round shift_round, int shift_leaf);

  int leaf_count() const override { return static_cast<int>(p_.size()); }
  void Costs(Round t, EnvRng& rng, std::span<double> out) const override;
  bool has_expected_costs() const override { return true; }
  void ExpectedCosts(Round t, std::span<double> out) const override;

  const std::vector<double>& initial_means() const { return p_; }
  Round shift_round() const { return shift_round_; }
  int shift_leaf() const { return shift_leaf_; }

 private:
  std::vector<double> p_;
  Round shift_round_;
  int shift_leaf_;
};

// Default mean ladder for the Bernoulli tree scenario over n leaves:
// leaf 0 starts at 1 (and is the one that later drops to 0); leaves 1..n-1
// descend linearly, p_j = p_min + (n-1-j)(1-p_min)/n, ending at p_min. For
// D=2, L=2, p_min=0.2 this gives (1, 0.6, 0.4, 0.2).
std::vector<double> BernoulliLadder(int leaf_count, double p_min);

// Scenario with the shift at max(1, T/100) applied to leaf 0.
BernoulliTreeEnv MakeBernoulliTreeEnv(const TreeTopology& tree, double p_min,
                                      Round horizon);

// Two-child chain used for the lower bound. Leaf positions follow
// BuildChainTree: position k holds label L+1+k.
class LowerBoundChainEnv final : public CostEnvironment {
 public:
  using CostEnvironment::Costs;
  using CostEnvironment::ExpectedCosts;
  LowerBoundChainEnv(int depth, double delta, bool best_last_leaf);

  int leaf_count() const override { return static_cast<int>(p_.size()); }
  void Costs(Round t, EnvRng& rng, std::span<double> out) const override;
  bool has_expected_costs() const override { return true; }
  void ExpectedCosts(Round t, std::span<double> out) const override;

  int depth() const { return depth_; }
  double delta() const { return delta_; }
  // Mean of the leaf with the given label (L+1 .. 2L+1).
  double mean_for_label(int label) const;
  const std::vector<double>& means() const { return p_; }
  // (1 - 2^L delta) / 2, the smallest leaf mean.
  double min_mean() const;

 private:
  int depth_;
  double delta_;
  std::vector<double> p_;
};

// Requires 0 < delta < 2^-L. By default the low mean sits on leaf 2L.
LowerBoundChainEnv MakeLowerBoundEnv(int depth, double delta,
                                     bool best_last_leaf = false);

// Exponential link delay with rate lambda(t) moving linearly from
// `rate_start` at t=1 to `rate_end` at t=horizon.
struct LinkSchedule {
  double rate_start = 8.0;
  double rate_end = 8.0;
  Round horizon = 1;

  double RateAt(Round t) const;
};

struct LatencyLeaf {
  std::vector<int> links;   // indices into the link table; summed delays
  double processing = 0.0;  // deterministic processing time
  double miss_rate = 0.0;   // cost when the deadline is met
};

// Cost is 1 when sum(link delays) + processing exceeds the deadline, else the
// leaf's miss rate. Link delays are drawn once per round, so leaves sharing a
// physical link see the same delay.
class DeadlineLatencyEnv final : public CostEnvironment {
 public:
  using CostEnvironment::Costs;
  using CostEnvironment::ExpectedCosts;
  DeadlineLatencyEnv(std::vector<LinkSchedule> links,
                     std::vector<LatencyLeaf> leaves, double deadline = 1.0);

  int leaf_count() const override { return static_cast<int>(leaves_.size()); }
  void Costs(Round t, EnvRng& rng, std::span<double> out) const override;
  bool has_expected_costs() const override { return true; }
  void ExpectedCosts(Round t, std::span<double> out) const override;

  const std::vector<LinkSchedule>& links() const { return links_; }
  const std::vector<LatencyLeaf>& latency_leaves() const { return leaves_; }
  double deadline() const { return deadline_; }

 private:
  std::vector<LinkSchedule> links_;
  std::vector<LatencyLeaf> leaves_;
  double deadline_;
};

// P(sum of independent Exp(rates[k]) > s), computed by uniformization of the
// equivalent pure-birth chain.
double SumOfExponentialsSurvival(std::span<const double> rates, double s);

struct ProcessingProfile {
  double time = 0.5;
  double miss_rate = 0.005;
};

struct LatencyScenarioOptions {
  double constant_rate = 8.0;
  double ramp_start = 2.0;
  double ramp_end = 200.0;
  std::vector<ProcessingProfile> profiles = {
      {0.5, 0.005}, {0.2, 0.10}, {0.1, 0.133}};
  double deadline = 1.0;
};

// Edge offloading on a uniform tree with L=2: the root picks one of D servers
// over its own link (even servers constant-rate, odd servers ramping), and each
// server picks one of D processing profiles (cycled from options.profiles).
DeadlineLatencyEnv MakeMecEnv(const TreeTopology& tree, Round horizon,
                              const LatencyScenarioOptions& options = {});

// Layered relay network unrolled into a uniform D-ary tree of depth L: the
// source chooses a first-hop relay, each relay in layer k chooses a relay in
// layer k+1, and the last relay forwards to the destination. Physical links
// are shared between tree paths; link (k, a -> b) ramps when a+b+k is odd.
// Miss rate is 0, so cost is the deadline-violation indicator.
DeadlineLatencyEnv MakeMultihopEnv(const TreeTopology& tree, Round horizon,
                                   const LatencyScenarioOptions& options = {});

// Replays a fixed cost matrix: row t-1 is round t. Columns are leaf positions.
class CsvReplayEnv final : public CostEnvironment {
 public:
  using CostEnvironment::Costs;
  using CostEnvironment::ExpectedCosts;
  explicit CsvReplayEnv(std::vector<std::vector<double>> rows);

  int leaf_count() const override { return leaf_count_; }
  void Costs(Round t, EnvRng& rng, std::span<double> out) const override;
  Round rounds() const { return static_cast<Round>(rows_.size()); }

 private:
  std::vector<std::vector<double>> rows_;
  int leaf_count_;
};

// CSV with a header of leaf node ids and one row per round. Columns may come
// in any order but must name every leaf of `tree` exactly once.
CsvReplayEnv ParseCostCsv(std::string_view text, const TreeTopology& tree);

}  // namespace mstage
