#include "mstage/policy.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "mstage/errors.h"

namespace mstage {

namespace {

void CheckCost(double cost) {
  if (!(cost >= 0.0 && cost <= 1.0)) {
    throw std::invalid_argument("cost " + std::to_string(cost) +
                                " is outside [0,1]");
  }
}

int UniformChild(int fanout, NodeRng& rng) {
  const int c = static_cast<int>(Uniform01(rng) * fanout);
  return std::min(c, fanout - 1);
}

// Mode draw shared by the free function and the cached policy path.
ModeDraw DrawMode(std::span<const double> softmax, double epsilon,
                  NodeRng& rng) {
  const double u = Uniform01(rng);
  if (u < epsilon) {
    return {Mode::kUniform, UniformChild(static_cast<int>(softmax.size()), rng)};
  }
  return {Mode::kExp3, SampleIndex(softmax, Uniform01(rng))};
}

double ImportanceEstimate(Mode mode, int fanout, double conditional_prob,
                          double cost, double receive_prob) {
  CheckCost(cost);
  if (!(receive_prob > 0.0) || receive_prob > 1.0 + 1e-12) {
    throw std::invalid_argument("receive probability must lie in (0,1]");
  }
  const double p = mode == Mode::kUniform ? 1.0 / fanout : conditional_prob;
  const double denom = receive_prob * p;
  if (!(denom >= kProbabilityFloor)) {
    throw NumericalError("selection probability underflowed (v*p = " +
                         std::to_string(denom) + ")");
  }
  return cost / denom;
}

void MixInto(std::span<const double> softmax, double epsilon,
             std::span<double> out) {
  const double floor = epsilon / static_cast<double>(softmax.size());
  for (std::size_t j = 0; j < softmax.size(); ++j) {
    out[j] = floor + (1.0 - epsilon) * softmax[j];
  }
}

}  // namespace

PolicyParams DefaultParams(Round horizon, int depth, int max_fanout,
                           bool children_all_leaves) {
  if (horizon < 1) throw ConfigError("horizon T must be >= 1");
  if (depth < 1) throw ConfigError("depth L must be >= 1");
  if (max_fanout < 2) throw ConfigError("fanout D must be >= 2");
  const double T = static_cast<double>(horizon);
  const double L = depth;
  PolicyParams p;
  p.eta = std::pow(T, -L / (L + 1.0));
  p.epsilon = children_all_leaves
                  ? 0.0
                  : std::min(1.0, max_fanout * std::pow(T, -1.0 / (L + 1.0)));
  return p;
}

double NormalizedEgEta(Round horizon, int fanout) {
  if (horizon < 1) throw ConfigError("horizon T must be >= 1");
  if (fanout < 1) throw ConfigError("fanout must be >= 1");
  return std::sqrt(std::log(static_cast<double>(fanout)) /
                   static_cast<double>(horizon));
}

void StableSoftmax(std::span<const double> theta, double eta,
                   std::span<double> out) {
  const double top = *std::max_element(theta.begin(), theta.end());
  double total = 0.0;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    out[j] = std::exp(eta * (theta[j] - top));
    total += out[j];
  }
  for (std::size_t j = 0; j < theta.size(); ++j) out[j] /= total;
}

std::vector<double> ExpWeights(const NodePolicyState& state) {
  std::vector<double> out(state.theta.size());
  StableSoftmax(state.theta, state.eta, out);
  return out;
}

std::vector<double> MixtureDistribution(const NodePolicyState& state) {
  auto x = ExpWeights(state);
  MixInto(std::vector<double>(x), state.epsilon, x);
  return x;
}

// -- Normalized EG ---------------------------------------------------------------

int EgSelect(const NodePolicyState& state, NodeRng& rng) {
  return SampleIndex(ExpWeights(state), Uniform01(rng));
}

void EgUpdate(NodePolicyState& state, std::span<const double> child_costs) {
  if (child_costs.size() != state.theta.size()) {
    throw std::invalid_argument("need one cost per child");
  }
  for (double y : child_costs) CheckCost(y);
  for (std::size_t j = 0; j < child_costs.size(); ++j) {
    state.theta[j] -= child_costs[j];
  }
}

// -- eps-EXP3 ---------------------------------------------------------------------

ModeDraw Eexp3Select(const NodePolicyState& state, NodeRng& rng) {
  return DrawMode(ExpWeights(state), state.epsilon, rng);
}

double Eexp3Estimate(const NodePolicyState& state, const ModeDraw& draw,
                     double cost, double receive_prob) {
  if (draw.child < 0 || draw.child >= state.fanout()) {
    throw std::invalid_argument("chosen child out of range");
  }
  const double conditional =
      draw.mode == Mode::kExp3 ? ExpWeights(state)[draw.child] : 0.0;
  return ImportanceEstimate(draw.mode, state.fanout(), conditional, cost,
                            receive_prob);
}

void Eexp3Update(NodePolicyState& state, const ModeDraw& draw, double cost,
                 double receive_prob) {
  state.theta[draw.child] -= Eexp3Estimate(state, draw, cost, receive_prob);
}

// -- Doubling trick -----------------------------------------------------------------

AnytimeStep AnytimeSchedule(Round t) {
  if (t < 1) throw std::invalid_argument("round index must be >= 1");
  const auto ut = static_cast<unsigned long long>(t);
  AnytimeStep step;
  step.segment = static_cast<int>(std::bit_width(ut)) - 1;
  step.segment_start = static_cast<Round>(1ULL << step.segment);
  step.horizon = step.segment_start;
  step.reset = t == step.segment_start;
  return step;
}

// -- EXP3 baseline --------------------------------------------------------------------

Exp3Params ClassicExp3Params(Round horizon, int fanout) {
  if (horizon < 1) throw ConfigError("horizon T must be >= 1");
  if (fanout < 1) throw ConfigError("fanout must be >= 1");
  const double K = fanout;
  Exp3Params p;
  p.gamma = std::min(1.0, std::sqrt(K * std::log(K) /
                                    ((std::numbers::e - 1.0) * horizon)));
  p.eta = p.gamma / K;
  return p;
}

std::vector<double> Exp3Distribution(const Exp3State& state) {
  std::vector<double> x(state.theta.size());
  StableSoftmax(state.theta, state.params.eta, x);
  MixInto(std::vector<double>(x), state.params.gamma, x);
  return x;
}

int Exp3Select(const Exp3State& state, NodeRng& rng) {
  return SampleIndex(Exp3Distribution(state), Uniform01(rng));
}

double Exp3Estimate(const Exp3State& state, int child, double cost) {
  CheckCost(cost);
  const double p = Exp3Distribution(state).at(child);
  if (!(p >= kProbabilityFloor)) {
    throw NumericalError("exp3 selection probability underflowed");
  }
  return cost / p;
}

void Exp3Update(Exp3State& state, int child, double cost) {
  state.theta.at(child) -= Exp3Estimate(state, child, cost);
}

// -- Oracle ---------------------------------------------------------------------------

OracleParams OracleParams::Constant(double q) {
  const double p = std::min(0.5, q);
  return {[p](double) { return p; }};
}

OracleParams OracleParams::Exponential(double q) {
  return {[q](double zeta) { return std::min(0.5, q * std::exp(-zeta)); }};
}

double DefaultOracleQ(Round horizon, int depth) {
  if (horizon < 1) throw ConfigError("horizon T must be >= 1");
  if (depth < 1) throw ConfigError("depth L must be >= 1");
  return std::pow(static_cast<double>(horizon), -1.0 / depth);
}

std::array<double, 2> OracleDistribution(const OracleParams& params,
                                         double cost0, double cost1) {
  if (cost0 == cost1) return {0.5, 0.5};
  const double prob = params.forward_prob(std::abs(cost0 - cost1));
  if (!(prob >= 0.0 && prob <= 1.0)) {
    throw NumericalError("oracle forwarding probability outside [0,1]");
  }
  return cost0 > cost1 ? std::array<double, 2>{prob, 1.0 - prob}
                       : std::array<double, 2>{1.0 - prob, prob};
}

int OracleSelect(const OracleParams& params, double cost0, double cost1,
                 NodeRng& rng) {
  const auto x = OracleDistribution(params, cost0, cost1);
  return SampleIndex(x, Uniform01(rng));
}

// -- NodePolicy -------------------------------------------------------------------------

void NodePolicy::ObserveBandit(const ModeDraw&, double cost, double) {
  CheckCost(cost);
}

void NodePolicy::ObserveFull(std::span<const double> child_costs) {
  for (double y : child_costs) CheckCost(y);
}

NormalizedEgPolicy::NormalizedEgPolicy(int fanout, double eta)
    : state_(fanout, {eta, 0.0}), x_(fanout) {}

std::span<const double> NormalizedEgPolicy::Distribution() const {
  if (dirty_) {
    StableSoftmax(state_.theta, state_.eta, x_);
    dirty_ = false;
  }
  return x_;
}

ModeDraw NormalizedEgPolicy::Select(NodeRng& rng) {
  return {Mode::kExp3, SampleIndex(Distribution(), Uniform01(rng))};
}

void NormalizedEgPolicy::ObserveFull(std::span<const double> child_costs) {
  EgUpdate(state_, child_costs);
  dirty_ = true;
}

EpsilonExp3Policy::EpsilonExp3Policy(int fanout, PolicyParams params)
    : state_(fanout, params), x_(2 * fanout) {}

void EpsilonExp3Policy::Reset(PolicyParams params) {
  std::fill(state_.theta.begin(), state_.theta.end(), 0.0);
  state_.eta = params.eta;
  state_.epsilon = params.epsilon;
  dirty_ = true;
}

// x_ holds the mixture in [0, K) and the EXP3-mode softmax in [K, 2K).
std::span<const double> EpsilonExp3Policy::Distribution() const {
  const int k = state_.fanout();
  if (dirty_) {
    std::span<double> soft(x_.data() + k, k);
    StableSoftmax(state_.theta, state_.eta, soft);
    MixInto(soft, state_.epsilon, std::span<double>(x_.data(), k));
    dirty_ = false;
  }
  return {x_.data(), static_cast<std::size_t>(k)};
}

ModeDraw EpsilonExp3Policy::Select(NodeRng& rng) {
  Distribution();
  const int k = state_.fanout();
  return DrawMode({x_.data() + k, static_cast<std::size_t>(k)}, state_.epsilon,
                  rng);
}

void EpsilonExp3Policy::ObserveBandit(const ModeDraw& draw, double cost,
                                      double receive_prob) {
  Distribution();
  const int k = state_.fanout();
  state_.theta[draw.child] -= ImportanceEstimate(
      draw.mode, k, x_[k + draw.child], cost, receive_prob);
  dirty_ = true;
}

AnytimeEpsilonExp3Policy::AnytimeEpsilonExp3Policy(int fanout, ParamRule rule)
    : EpsilonExp3Policy(fanout, rule(1)), rule_(std::move(rule)) {}

void AnytimeEpsilonExp3Policy::BeginRound(Round t) {
  const AnytimeStep step = AnytimeSchedule(t);
  if (step.segment != segment_) {
    Reset(rule_(step.horizon));
    segment_ = step.segment;
  }
}

Exp3BaselinePolicy::Exp3BaselinePolicy(int fanout, Exp3Params params)
    : state_(fanout, params), x_(fanout) {}

std::span<const double> Exp3BaselinePolicy::Distribution() const {
  if (dirty_) {
    StableSoftmax(state_.theta, state_.params.eta, x_);
    MixInto(std::vector<double>(x_), state_.params.gamma, x_);
    dirty_ = false;
  }
  return x_;
}

ModeDraw Exp3BaselinePolicy::Select(NodeRng& rng) {
  return {Mode::kExp3, SampleIndex(Distribution(), Uniform01(rng))};
}

void Exp3BaselinePolicy::ObserveBandit(const ModeDraw& draw, double cost,
                                       double) {
  CheckCost(cost);
  const double p = Distribution()[draw.child];
  if (!(p >= kProbabilityFloor)) {
    throw NumericalError("exp3 selection probability underflowed");
  }
  state_.theta[draw.child] -= cost / p;
  dirty_ = true;
}

StationaryPolicy::StationaryPolicy(int fanout, int child)
    : x_(fanout, 0.0), child_(child) {
  if (child < 0 || child >= fanout) {
    throw ConfigError("stationary child out of range");
  }
  x_[child] = 1.0;
}

UniformPolicy::UniformPolicy(int fanout) : x_(fanout, 1.0 / fanout) {}

ModeDraw UniformPolicy::Select(NodeRng& rng) {
  return {Mode::kUniform, UniformChild(fanout(), rng)};
}

OraclePolicy::OraclePolicy(OracleParams params) : params_(std::move(params)) {}

void OraclePolicy::SetChildExpectations(std::span<const double> costs) {
  if (costs.size() != 2) throw std::invalid_argument("oracle needs two children");
  x_ = OracleDistribution(params_, costs[0], costs[1]);
}

ModeDraw OraclePolicy::Select(NodeRng& rng) {
  return {Mode::kExp3, SampleIndex(x_, Uniform01(rng))};
}

// -- Assembly -----------------------------------------------------------------------------

std::string_view PolicyKindName(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::kNormalizedEg: return "normalized-eg";
    case PolicyKind::kEpsilonExp3: return "eps-exp3";
    case PolicyKind::kAnytimeEpsilonExp3: return "anytime-eps-exp3";
    case PolicyKind::kExp3: return "exp3";
    case PolicyKind::kStationary: return "stationary";
    case PolicyKind::kUniform: return "uniform";
    case PolicyKind::kOracle: return "oracle";
  }
  return "unknown";
}

std::optional<PolicyKind> ParsePolicyKind(std::string_view name) {
  for (auto k : {PolicyKind::kNormalizedEg, PolicyKind::kEpsilonExp3,
                 PolicyKind::kAnytimeEpsilonExp3, PolicyKind::kExp3,
                 PolicyKind::kStationary, PolicyKind::kUniform,
                 PolicyKind::kOracle}) {
    if (PolicyKindName(k) == name) return k;
  }
  return std::nullopt;
}

std::string PolicySpec::label() const {
  return name.empty() ? std::string(PolicyKindName(kind)) : name;
}

PolicySet BuildPolicies(const PolicySpec& spec, const TreeTopology& tree,
                        Round horizon) {
  if (horizon < 1) throw ConfigError("horizon T must be >= 1");
  if (spec.eta && !(*spec.eta > 0.0)) throw ConfigError("eta must be > 0");
  if (spec.epsilon && !(*spec.epsilon >= 0.0 && *spec.epsilon <= 1.0)) {
    throw ConfigError("epsilon must lie in [0,1]");
  }
  if (spec.gamma && !(*spec.gamma >= 0.0 && *spec.gamma <= 1.0)) {
    throw ConfigError("gamma must lie in [0,1]");
  }
  if (spec.oracle_q && !(*spec.oracle_q >= 0.0 && *spec.oracle_q <= 1.0)) {
    throw ConfigError("oracle q must lie in [0,1]");
  }

  const int L = tree.depth();
  const int D = std::max(2, tree.max_fanout());
  std::vector<int> stationary_child(tree.node_count(), 0);
  if (spec.kind == PolicyKind::kStationary) {
    const NodeId leaf = spec.stationary_leaf;
    if (leaf < 0 || leaf >= tree.node_count() || !tree.is_leaf(leaf)) {
      throw ConfigError("stationary policy needs a valid leaf id");
    }
    const auto path = tree.path_from_root(leaf);
    for (std::size_t k = 0; k + 1 < path.size(); ++k) {
      stationary_child[path[k]] = tree.child_position(path[k], path[k + 1]);
    }
  }

  // Copied by value: anytime policies keep this rule for the whole run.
  auto eexp3_params = [L, D, eta = spec.eta, epsilon = spec.epsilon](
                          Round T, bool all_leaves) {
    PolicyParams p = DefaultParams(T, L, D, all_leaves);
    if (eta) p.eta = *eta;
    if (epsilon && !all_leaves) p.epsilon = *epsilon;
    return p;
  };

  PolicySet set(tree.node_count());
  for (NodeId n = 0; n < tree.node_count(); ++n) {
    if (tree.is_leaf(n)) continue;
    const int k = static_cast<int>(tree.children(n).size());
    const bool all_leaves = tree.children_all_leaves(n);
    switch (spec.kind) {
      case PolicyKind::kNormalizedEg:
        set[n] = std::make_unique<NormalizedEgPolicy>(
            k, spec.eta.value_or(NormalizedEgEta(horizon, k)));
        break;
      case PolicyKind::kEpsilonExp3:
        set[n] = std::make_unique<EpsilonExp3Policy>(
            k, eexp3_params(horizon, all_leaves));
        break;
      case PolicyKind::kAnytimeEpsilonExp3:
        set[n] = std::make_unique<AnytimeEpsilonExp3Policy>(
            k, [eexp3_params, all_leaves](Round h) {
              return eexp3_params(h, all_leaves);
            });
        break;
      case PolicyKind::kExp3: {
        Exp3Params p = ClassicExp3Params(horizon, k);
        if (spec.gamma) {
          p.gamma = *spec.gamma;
          p.eta = p.gamma / k;
        }
        if (spec.eta) p.eta = *spec.eta;
        set[n] = std::make_unique<Exp3BaselinePolicy>(k, p);
        break;
      }
      case PolicyKind::kStationary:
        set[n] = std::make_unique<StationaryPolicy>(k, stationary_child[n]);
        break;
      case PolicyKind::kUniform:
        set[n] = std::make_unique<UniformPolicy>(k);
        break;
      case PolicyKind::kOracle: {
        if (all_leaves) {
          set[n] = std::make_unique<EpsilonExp3Policy>(
              k, eexp3_params(horizon, true));
          break;
        }
        if (k != 2) {
          throw ConfigError("oracle nodes need exactly two children (node " +
                            std::to_string(n) + " has " + std::to_string(k) +
                            ")");
        }
        const double q = spec.oracle_q.value_or(DefaultOracleQ(horizon, L));
        set[n] = std::make_unique<OraclePolicy>(
            spec.oracle_shape == OracleShape::kConstant
                ? OracleParams::Constant(q)
                : OracleParams::Exponential(q));
        break;
      }
    }
  }
  return set;
}

}  // namespace mstage
