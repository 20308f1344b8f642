#pragma once

#include <array>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mstage/env.h"
#include "mstage/rng.h"
#include "mstage/topology.h"

namespace mstage {

// Learning rate and uniform-mode probability for one node.
struct PolicyParams {
  double eta = 1.0;
  double epsilon = 0.0;
};

// Fixed-horizon settings that make distributed eps-EXP3 no-regret:
// eta = T^(-L/(L+1)); epsilon = 0 when every child is a leaf, otherwise
// D * T^(-1/(L+1)) clamped to 1 (the raw value exceeds 1 for tiny T).
PolicyParams DefaultParams(Round horizon, int depth, int max_fanout,
                           bool children_all_leaves);

// sqrt(log|C| / T), the normalized-EG rate for complete one-hop feedback.
double NormalizedEgEta(Round horizon, int fanout);

// Writes exp(eta*theta_j) / sum_k exp(eta*theta_k), shifted by max theta so
// long horizons (theta -> -inf) neither overflow nor underflow to all zeros.
void StableSoftmax(std::span<const double> theta, double eta,
                   std::span<double> out);

enum class Mode { kUniform, kExp3 };

struct ModeDraw {
  Mode mode = Mode::kExp3;
  int child = 0;  // position among the node's children
};

// Per-node learner state: theta[j] accumulates (estimated) child costs with a
// minus sign, so entries only ever decrease.
struct NodePolicyState {
  std::vector<double> theta;
  double eta = 1.0;
  double epsilon = 0.0;

  NodePolicyState() = default;
  NodePolicyState(int fanout, PolicyParams params)
      : theta(fanout, 0.0), eta(params.eta), epsilon(params.epsilon) {}

  int fanout() const { return static_cast<int>(theta.size()); }
};

// softmax(eta * theta): the EXP3-mode (and normalized-EG) distribution.
std::vector<double> ExpWeights(const NodePolicyState& state);
// epsilon/|C| + (1-epsilon) softmax(eta * theta): eps-EXP3's marginal x.
std::vector<double> MixtureDistribution(const NodePolicyState& state);

// -- Normalized exponential gradient (complete one-hop feedback) -------------

int EgSelect(const NodePolicyState& state, NodeRng& rng);
// theta_j -= y_j for every child. Throws std::invalid_argument if any
// y_j is outside [0,1] or the size is wrong.
void EgUpdate(NodePolicyState& state, std::span<const double> child_costs);

// -- eps-EXP3 (end-to-end bandit feedback) -----------------------------------

// Mode U with probability epsilon (uniform child), otherwise mode E
// (child ~ softmax(eta * theta)).
ModeDraw Eexp3Select(const NodePolicyState& state, NodeRng& rng);

// Importance-weighted estimate z for the chosen child: y |C| / v in mode U,
// y / (v * softmax_j) in mode E. Throws std::invalid_argument for v <= 0 or
// y outside [0,1], and NumericalError if v * softmax_j underflows below
// kProbabilityFloor.
double Eexp3Estimate(const NodePolicyState& state, const ModeDraw& draw,
                     double cost, double receive_prob);

// theta[chosen] -= Eexp3Estimate(...). Other entries are untouched.
void Eexp3Update(NodePolicyState& state, const ModeDraw& draw, double cost,
                 double receive_prob);

inline constexpr double kProbabilityFloor = 1e-300;

// -- Doubling trick ------------------------------------------------------------

struct AnytimeStep {
  int segment = 0;          // m = floor(log2 t)
  Round segment_start = 1;  // 2^m
  Round horizon = 1;        // segment length 2^m, used in place of T
  bool reset = false;       // true exactly when t == 2^m
};

AnytimeStep AnytimeSchedule(Round t);

// -- Independent per-node EXP3 baseline ----------------------------------------

struct Exp3Params {
  double gamma = 0.0;  // uniform mixing
  double eta = 0.0;    // exponential-weights rate
};

// gamma = min(1, sqrt(K ln K / ((e-1) T))), eta = gamma / K.
Exp3Params ClassicExp3Params(Round horizon, int fanout);

struct Exp3State {
  std::vector<double> theta;
  Exp3Params params;

  Exp3State() = default;
  Exp3State(int fanout, Exp3Params p) : theta(fanout, 0.0), params(p) {}
};

// (1-gamma) softmax(eta * theta) + gamma / K.
std::vector<double> Exp3Distribution(const Exp3State& state);
int Exp3Select(const Exp3State& state, NodeRng& rng);
// y / x_j with x_j the node's own selection probability; no receive
// probability is involved, so the estimate is unbiased only conditional on
// the node receiving the job.
double Exp3Estimate(const Exp3State& state, int child, double cost);
void Exp3Update(Exp3State& state, int child, double cost);

// -- Time-homogeneous oracle ---------------------------------------------------

// P(zeta): probability of forwarding to the child with the higher expected
// cost, as a non-increasing function of the gap zeta >= 0.
struct OracleParams {
  std::function<double(double)> forward_prob;

  // P(zeta) = min(1/2, q).
  static OracleParams Constant(double q);
  // P(zeta) = min(1/2, q * exp(-zeta)).
  static OracleParams Exponential(double q);
};

// q = T^(-1/L).
double DefaultOracleQ(Round horizon, int depth);

// Forwarding distribution over two children given their expected costs.
// Exact ties split 1/2 each.
std::array<double, 2> OracleDistribution(const OracleParams& params,
                                         double cost0, double cost1);
int OracleSelect(const OracleParams& params, double cost0, double cost1,
                 NodeRng& rng);

// -- Engine-facing node policies -----------------------------------------------

// One non-leaf node's forwarding rule. Single-writer state owned by a run.
class NodePolicy {
 public:
  virtual ~NodePolicy() = default;

  virtual std::string_view kind() const = 0;
  virtual int fanout() const = 0;

  // x[i, ., t] for the upcoming selection.
  virtual std::span<const double> Distribution() const = 0;
  virtual ModeDraw Select(NodeRng& rng) = 0;

  // End-to-end bandit feedback: the node received the job with probability
  // `receive_prob`, chose `draw`, and the job eventually cost `cost`.
  virtual void ObserveBandit(const ModeDraw& draw, double cost,
                             double receive_prob);
  // Complete one-hop feedback: y[j, t] for every child j.
  virtual void ObserveFull(std::span<const double> child_costs);

  // Round-start hook, called on every node before any selection.
  virtual bool wants_round_start() const { return false; }
  virtual void BeginRound(Round) {}

  // Oracle nodes get E[y[j, t]] for each child before selecting.
  virtual bool wants_child_expectations() const { return false; }
  virtual void SetChildExpectations(std::span<const double>) {}

  // Learner accumulator, empty for policies without one.
  virtual std::span<const double> Theta() const { return {}; }
};

class NormalizedEgPolicy final : public NodePolicy {
 public:
  NormalizedEgPolicy(int fanout, double eta);

  std::string_view kind() const override { return "normalized-eg"; }
  int fanout() const override { return state_.fanout(); }
  std::span<const double> Distribution() const override;
  ModeDraw Select(NodeRng& rng) override;
  void ObserveFull(std::span<const double> child_costs) override;
  std::span<const double> Theta() const override { return state_.theta; }
  const NodePolicyState& state() const { return state_; }

 private:
  NodePolicyState state_;
  mutable std::vector<double> x_;
  mutable bool dirty_ = true;
};

class EpsilonExp3Policy : public NodePolicy {
 public:
  EpsilonExp3Policy(int fanout, PolicyParams params);

  std::string_view kind() const override { return "eps-exp3"; }
  int fanout() const override { return state_.fanout(); }
  std::span<const double> Distribution() const override;
  ModeDraw Select(NodeRng& rng) override;
  void ObserveBandit(const ModeDraw& draw, double cost,
                     double receive_prob) override;
  std::span<const double> Theta() const override { return state_.theta; }
  const NodePolicyState& state() const { return state_; }

 protected:
  void Reset(PolicyParams params);

 private:
  NodePolicyState state_;
  mutable std::vector<double> x_;
  mutable bool dirty_ = true;
};

// eps-EXP3 restarted on segments [2^m, 2^(m+1)) with parameters recomputed
// from horizon 2^m; theta is zeroed at every segment start.
class AnytimeEpsilonExp3Policy final : public EpsilonExp3Policy {
 public:
  using ParamRule = std::function<PolicyParams(Round horizon)>;

  AnytimeEpsilonExp3Policy(int fanout, ParamRule rule);

  std::string_view kind() const override { return "anytime-eps-exp3"; }
  bool wants_round_start() const override { return true; }
  void BeginRound(Round t) override;
  int segment() const { return segment_; }

 private:
  ParamRule rule_;
  int segment_ = -1;
};

class Exp3BaselinePolicy final : public NodePolicy {
 public:
  Exp3BaselinePolicy(int fanout, Exp3Params params);

  std::string_view kind() const override { return "exp3"; }
  int fanout() const override { return static_cast<int>(state_.theta.size()); }
  std::span<const double> Distribution() const override;
  ModeDraw Select(NodeRng& rng) override;
  void ObserveBandit(const ModeDraw& draw, double cost,
                     double receive_prob) override;
  std::span<const double> Theta() const override { return state_.theta; }
  const Exp3State& state() const { return state_; }

 private:
  Exp3State state_;
  mutable std::vector<double> x_;
  mutable bool dirty_ = true;
};

// Always forwards to the same child.
class StationaryPolicy final : public NodePolicy {
 public:
  StationaryPolicy(int fanout, int child);

  std::string_view kind() const override { return "stationary"; }
  int fanout() const override { return static_cast<int>(x_.size()); }
  std::span<const double> Distribution() const override { return x_; }
  ModeDraw Select(NodeRng&) override { return {Mode::kExp3, child_}; }

 private:
  std::vector<double> x_;
  int child_;
};

class UniformPolicy final : public NodePolicy {
 public:
  explicit UniformPolicy(int fanout);

  std::string_view kind() const override { return "uniform"; }
  int fanout() const override { return static_cast<int>(x_.size()); }
  std::span<const double> Distribution() const override { return x_; }
  ModeDraw Select(NodeRng& rng) override;

 private:
  std::vector<double> x_;
};

class OraclePolicy final : public NodePolicy {
 public:
  explicit OraclePolicy(OracleParams params);

  std::string_view kind() const override { return "oracle"; }
  int fanout() const override { return 2; }
  std::span<const double> Distribution() const override { return x_; }
  ModeDraw Select(NodeRng& rng) override;
  bool wants_child_expectations() const override { return true; }
  void SetChildExpectations(std::span<const double> costs) override;

 private:
  OracleParams params_;
  std::array<double, 2> x_{0.5, 0.5};
};

// -- Policy assembly -----------------------------------------------------------

enum class PolicyKind {
  kNormalizedEg,
  kEpsilonExp3,
  kAnytimeEpsilonExp3,
  kExp3,
  kStationary,
  kUniform,
  kOracle,
};

enum class OracleShape { kConstant, kExponential };

// Policy choice plus optional overrides of the theorem-backed defaults.
struct PolicySpec {
  PolicyKind kind = PolicyKind::kEpsilonExp3;
  std::string name;  // label in outputs; defaults to PolicyKindName(kind)
  std::optional<double> eta;
  // Applied to nodes that have a non-leaf child; nodes whose children are all
  // leaves keep epsilon = 0.
  std::optional<double> epsilon;
  std::optional<double> gamma;
  std::optional<double> oracle_q;
  OracleShape oracle_shape = OracleShape::kConstant;
  NodeId stationary_leaf = kNoNode;  // target leaf for kStationary

  std::string label() const;
};

std::string_view PolicyKindName(PolicyKind kind);
std::optional<PolicyKind> ParsePolicyKind(std::string_view name);

using PolicySet = std::vector<std::unique_ptr<NodePolicy>>;

// One policy per non-leaf node (nullptr at leaves). The oracle kind puts
// oracle policies on nodes with a non-leaf child (these need exactly two
// children) and fixed-horizon eps-EXP3 on nodes whose children are all leaves.
PolicySet BuildPolicies(const PolicySpec& spec, const TreeTopology& tree,
                        Round horizon);

}  // namespace mstage
