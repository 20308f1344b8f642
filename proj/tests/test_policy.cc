#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mstage/errors.h"
#include "mstage/policy.h"
#include "mstage/topology.h"
#include "support/estimator_mc.h"

using namespace mstage;

namespace {

NodePolicyState State(std::vector<double> theta, double eta, double eps) {
  NodePolicyState s(static_cast<int>(theta.size()), {eta, eps});
  s.theta = std::move(theta);
  return s;
}

std::vector<double> Frequencies(int fanout, int n, auto&& draw) {
  std::vector<double> f(fanout, 0.0);
  for (int i = 0; i < n; ++i) f[draw()] += 1.0;
  for (double& v : f) v /= n;
  return f;
}

}  // namespace

TEST_CASE("default params") {
  auto p = DefaultParams(1000000, 2, 2, false);
  CHECK(p.eta == doctest::Approx(1e-4).epsilon(1e-9));
  CHECK(p.epsilon == doctest::Approx(0.02).epsilon(1e-9));

  p = DefaultParams(1000000, 2, 2, true);
  CHECK(p.eta == doctest::Approx(1e-4).epsilon(1e-9));
  CHECK(p.epsilon == 0.0);

  p = DefaultParams(16, 1, 2, true);
  CHECK(p.eta == doctest::Approx(0.25));
  CHECK(p.epsilon == 0.0);

  // D T^(-1/(L+1)) exceeds 1 for small T
  p = DefaultParams(4, 2, 4, false);
  CHECK(p.epsilon == 1.0);

  CHECK_THROWS_AS(DefaultParams(0, 2, 2, false), ConfigError);
  CHECK_THROWS_AS(DefaultParams(10, 0, 2, false), ConfigError);
}

TEST_CASE("normalized EG eta") {
  CHECK(NormalizedEgEta(100000, 2) == doctest::Approx(std::sqrt(std::log(2.0) / 1e5)));
  CHECK(NormalizedEgEta(100, 4) == doctest::Approx(std::sqrt(std::log(4.0) / 100)));
}

TEST_CASE("stable softmax") {
  std::vector<double> out(2);
  const double th[] = {0.0, 0.0};
  StableSoftmax(th, 0.7, out);
  CHECK(out[0] == doctest::Approx(0.5));

  const double big[] = {-1e6, -1e6 - 3.0};
  StableSoftmax(big, 1.0, out);
  CHECK(out[0] == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))));
  CHECK(std::isfinite(out[1]));

  const double tiny[] = {0.0, -1e9};
  StableSoftmax(tiny, 1.0, out);
  CHECK(out[0] == 1.0);
  CHECK(out[1] == 0.0);
}

TEST_CASE("eg select examples") {
  auto s = State({0, 0}, 0.3, 0);
  CHECK(ExpWeights(s) == std::vector<double>{0.5, 0.5});

  s = State({-5, -5, -5}, 0.3, 0);
  for (double x : ExpWeights(s)) CHECK(x == doctest::Approx(1.0 / 3).epsilon(1e-12));

  // t rounds: child 0 costs 0, child 1 costs 1.
  const double eta = 0.05;
  auto run = State({0, 0}, eta, 0);
  for (int t = 1; t <= 40; ++t) {
    const double y[] = {0.0, 1.0};
    EgUpdate(run, y);
    CHECK(ExpWeights(run)[0] == doctest::Approx(1.0 / (1.0 + std::exp(-eta * t))).epsilon(1e-12));
  }

  NodeRng rng(5);
  s = State({0, -20}, 0.1, 0);
  const auto f = Frequencies(2, 20000, [&] { return EgSelect(s, rng); });
  const double x0 = 1.0 / (1.0 + std::exp(-2.0));
  CHECK(std::abs(f[0] - x0) < 4 * std::sqrt(x0 * (1 - x0) / 20000));
}

TEST_CASE("eg update examples") {
  auto s = State({0, 0}, 1, 0);
  const double y1[] = {1, 0};
  EgUpdate(s, y1);
  CHECK(s.theta == std::vector<double>{-1, 0});

  s = State({-2, -3}, 1, 0);
  const double y2[] = {0.5, 0.5};
  EgUpdate(s, y2);
  CHECK(s.theta == std::vector<double>{-2.5, -3.5});

  const double bad[] = {0.5, 1.5};
  CHECK_THROWS_AS(EgUpdate(s, bad), std::invalid_argument);
  const double short_y[] = {0.5};
  CHECK_THROWS_AS(EgUpdate(s, short_y), std::invalid_argument);
}

TEST_CASE("eps-exp3 mixture examples") {
  CHECK(MixtureDistribution(State({0, 0}, 1, 0.5)) == std::vector<double>{0.5, 0.5});
  for (double x : MixtureDistribution(State({0, 0}, 1, 0.02))) {
    CHECK(x == doctest::Approx(0.5).epsilon(1e-15));
  }
  const auto x = MixtureDistribution(State({0, -10}, 1, 0.2));
  const double expect = 0.2 * 0.5 + 0.8 / (1.0 + std::exp(-10.0));
  CHECK(x[0] == doctest::Approx(expect).epsilon(1e-12));
  CHECK(x[0] == doctest::Approx(0.89997).epsilon(1e-5));
  CHECK(x[0] + x[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("eps-exp3 select follows the mixture") {
  NodeRng rng(11);
  const auto s = State({0, -2, -1, 0}, 0.8, 0.3);
  const auto x = MixtureDistribution(s);
  const int n = 40000;
  int uniform_draws = 0;
  const auto f = Frequencies(4, n, [&] {
    const auto d = Eexp3Select(s, rng);
    if (d.mode == Mode::kUniform) ++uniform_draws;
    return d.child;
  });
  for (int j = 0; j < 4; ++j) {
    CHECK(std::abs(f[j] - x[j]) < 4 * std::sqrt(x[j] * (1 - x[j]) / n));
  }
  CHECK(std::abs(uniform_draws / double(n) - 0.3) < 4 * std::sqrt(0.3 * 0.7 / n));
}

TEST_CASE("eps-exp3 decrement examples") {
  auto s = State({0, 0}, 0.37, 0.5);
  CHECK(Eexp3Estimate(s, {Mode::kUniform, 1}, 1.0, 0.5) == doctest::Approx(4.0));
  CHECK(Eexp3Estimate(s, {Mode::kExp3, 0}, 1.0, 1.0) == doctest::Approx(2.0));

  Eexp3Update(s, {Mode::kUniform, 1}, 1.0, 0.5);
  CHECK(s.theta == std::vector<double>{0.0, -4.0});

  for (Mode m : {Mode::kUniform, Mode::kExp3}) {
    auto z = State({-1, -2}, 0.5, 0.1);
    Eexp3Update(z, {m, 1}, 0.0, 0.3);
    CHECK(z.theta == std::vector<double>{-1, -2});
  }
}

TEST_CASE("eps-exp3 estimate guards") {
  auto s = State({0, 0}, 1, 0.1);
  CHECK_THROWS_AS(Eexp3Estimate(s, {Mode::kExp3, 0}, 0.5, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(Eexp3Estimate(s, {Mode::kExp3, 0}, 0.5, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(Eexp3Estimate(s, {Mode::kExp3, 0}, 1.5, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(Eexp3Estimate(s, {Mode::kExp3, 3}, 0.5, 0.5), std::invalid_argument);
  // conditional probability underflows to 0
  auto u = State({0, -1e6}, 1, 0.1);
  CHECK_THROWS_AS(Eexp3Estimate(u, {Mode::kExp3, 1}, 0.5, 1e-10), NumericalError);
  // mode U stays finite
  CHECK(std::isfinite(Eexp3Estimate(u, {Mode::kUniform, 1}, 0.5, 1e-10)));
}

TEST_CASE("estimator moments match the closed forms") {
  NodeRng rng(2024);
  for (int k = 0; k < 3; ++k) {
    const auto c = testing::RandomEstimatorCase(rng);
    const auto m = testing::SimulateEstimator(c, 200000, rng);
    CHECK(m.first.z_score() < 4.0);
    CHECK(m.second.z_score() < 4.0);
  }
}

TEST_CASE("anytime schedule") {
  auto s = AnytimeSchedule(1);
  CHECK(s.segment == 0);
  CHECK(s.reset);
  CHECK(s.horizon == 1);

  s = AnytimeSchedule(8);
  CHECK(s.segment == 3);
  CHECK(s.reset);
  CHECK(s.horizon == 8);
  for (Round t = 9; t <= 15; ++t) {
    s = AnytimeSchedule(t);
    CHECK(s.segment == 3);
    CHECK_FALSE(s.reset);
  }
  CHECK(AnytimeSchedule(16).reset);

  // segment lengths 1, 2, 4, 8, ...
  std::vector<Round> lengths;
  Round len = 0;
  for (Round t = 1; t <= 1024; ++t) {
    if (AnytimeSchedule(t).reset && t > 1) {
      lengths.push_back(len);
      len = 0;
    }
    ++len;
  }
  for (std::size_t m = 0; m < lengths.size(); ++m) CHECK(lengths[m] == (Round{1} << m));
  CHECK_THROWS_AS(AnytimeSchedule(0), std::invalid_argument);
}

TEST_CASE("anytime policy resets theta at powers of two") {
  auto rule = [](Round T) { return DefaultParams(T, 2, 2, false); };
  AnytimeEpsilonExp3Policy p(2, rule);
  NodeRng rng(1);
  for (Round t = 1; t <= 70; ++t) {
    p.BeginRound(t);
    const auto step = AnytimeSchedule(t);
    CHECK(p.segment() == step.segment);
    if (step.reset) {
      for (double th : p.Theta()) CHECK(th == 0.0);
      const auto want = DefaultParams(step.horizon, 2, 2, false);
      CHECK(p.state().eta == want.eta);
      CHECK(p.state().epsilon == want.epsilon);
    }
    const auto d = p.Select(rng);
    p.ObserveBandit(d, 0.7, 1.0);
  }
}

TEST_CASE("classic exp3 params and distribution") {
  const auto p = ClassicExp3Params(100000, 2);
  const double gamma = std::sqrt(2 * std::log(2.0) / ((std::exp(1.0) - 1) * 1e5));
  CHECK(p.gamma == doctest::Approx(gamma));
  CHECK(p.eta == doctest::Approx(gamma / 2));
  CHECK(ClassicExp3Params(1, 4).gamma == 1.0);

  Exp3State s(2, p);
  CHECK(Exp3Distribution(s) == std::vector<double>{0.5, 0.5});
  s.theta = {0.0, -1e6};
  const auto x = Exp3Distribution(s);
  CHECK(x[1] == doctest::Approx(p.gamma / 2));

  Exp3Update(s, 1, 0.5);
  CHECK(s.theta[1] == doctest::Approx(-1e6 - 0.5 / x[1]));
}

TEST_CASE("exp3 estimator is unbiased given the node receives the job") {
  NodeRng rng(77);
  Exp3State s(3, {0.2, 0.5});
  s.theta = {0.0, -1.0, -3.0};
  const std::vector<double> y{0.3, 0.9, 0.6};
  const int n = 200000;
  for (int j = 0; j < 3; ++j) {
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
      const int c = Exp3Select(s, rng);
      const double z = c == j ? Exp3Estimate(s, c, y[c]) : 0.0;
      sum += z;
      sum2 += z * z;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n);
    CHECK(std::abs(mean - y[j]) < 4 * se);
  }
}

TEST_CASE("oracle distribution") {
  auto greedy = OracleParams::Constant(0.0);
  CHECK(OracleDistribution(greedy, 0.3, 0.7) == std::array<double, 2>{1.0, 0.0});
  NodeRng rng(3);
  for (int i = 0; i < 100; ++i) CHECK(OracleSelect(greedy, 0.3, 0.7, rng) == 0);

  auto quarter = OracleParams::Constant(0.25);
  CHECK(OracleDistribution(quarter, 0.3, 0.7) == std::array<double, 2>{0.75, 0.25});
  CHECK(OracleDistribution(quarter, 0.7, 0.3) == std::array<double, 2>{0.25, 0.75});
  const int n = 40000;
  int second = 0;
  for (int i = 0; i < n; ++i) second += OracleSelect(quarter, 0.3, 0.7, rng);
  CHECK(std::abs(second / double(n) - 0.25) < 4 * std::sqrt(0.25 * 0.75 / n));

  CHECK(OracleDistribution(quarter, 0.5, 0.5) == std::array<double, 2>{0.5, 0.5});
  CHECK(OracleDistribution(OracleParams::Constant(0.9), 0.2, 0.4)[1] == 0.5);

  auto expo = OracleParams::Exponential(0.4);
  CHECK(expo.forward_prob(0.0) == doctest::Approx(0.4));
  CHECK(expo.forward_prob(1.0) == doctest::Approx(0.4 * std::exp(-1.0)));
  CHECK(expo.forward_prob(2.0) < expo.forward_prob(1.0));

  CHECK(DefaultOracleQ(10000, 2) == doctest::Approx(0.01));
  CHECK(DefaultOracleQ(1000, 3) == doctest::Approx(0.1));
}

TEST_CASE("oracle policy reads child expectations") {
  OraclePolicy p(OracleParams::Constant(0.1));
  const double w[] = {0.8, 0.2};
  p.SetChildExpectations(w);
  const auto x = p.Distribution();
  CHECK(x[0] == doctest::Approx(0.1));
  CHECK(x[1] == doctest::Approx(0.9));
  const double bad[] = {0.1};
  CHECK_THROWS_AS(p.SetChildExpectations(bad), std::invalid_argument);
}

TEST_CASE("policy kinds round trip") {
  for (auto k : {PolicyKind::kNormalizedEg, PolicyKind::kEpsilonExp3,
                 PolicyKind::kAnytimeEpsilonExp3, PolicyKind::kExp3,
                 PolicyKind::kStationary, PolicyKind::kUniform, PolicyKind::kOracle}) {
    CHECK(ParsePolicyKind(PolicyKindName(k)) == k);
  }
  CHECK_FALSE(ParsePolicyKind("broad-omd").has_value());
  PolicySpec s;
  s.kind = PolicyKind::kExp3;
  CHECK(s.label() == "exp3");
  s.name = "exp3-fast";
  CHECK(s.label() == "exp3-fast");
}

TEST_CASE("build policies") {
  const auto tree = BuildUniformTree(2, 2);
  PolicySpec spec;
  spec.kind = PolicyKind::kEpsilonExp3;
  auto set = BuildPolicies(spec, tree, 1000000);
  REQUIRE(set.size() == 7u);
  for (NodeId leaf : tree.leaves()) CHECK(set[leaf] == nullptr);
  auto& root = dynamic_cast<EpsilonExp3Policy&>(*set[0]);
  auto& mid = dynamic_cast<EpsilonExp3Policy&>(*set[1]);
  CHECK(root.state().epsilon == doctest::Approx(0.02));
  CHECK(mid.state().epsilon == 0.0);
  CHECK(root.state().eta == doctest::Approx(1e-4));

  spec.epsilon = 0.3;
  set = BuildPolicies(spec, tree, 1000);
  CHECK(dynamic_cast<EpsilonExp3Policy&>(*set[0]).state().epsilon == 0.3);
  CHECK(dynamic_cast<EpsilonExp3Policy&>(*set[2]).state().epsilon == 0.0);

  PolicySpec stat;
  stat.kind = PolicyKind::kStationary;
  stat.stationary_leaf = 5;
  set = BuildPolicies(stat, tree, 10);
  NodeRng rng(0);
  CHECK(set[0]->Select(rng).child == 1);
  CHECK(set[2]->Select(rng).child == 0);
  stat.stationary_leaf = 2;
  CHECK_THROWS_AS(BuildPolicies(stat, tree, 10), ConfigError);

  PolicySpec oracle;
  oracle.kind = PolicyKind::kOracle;
  set = BuildPolicies(oracle, BuildChainTree(3), 1000);
  CHECK(set[0]->kind() == "oracle");
  CHECK(set[1]->kind() == "oracle");
  CHECK(set[2]->kind() == "eps-exp3");
  CHECK_THROWS_AS(BuildPolicies(oracle, BuildUniformTree(3, 2), 1000), ConfigError);

  PolicySpec bad;
  bad.eta = -1.0;
  CHECK_THROWS_AS(BuildPolicies(bad, tree, 10), ConfigError);
  bad = {};
  bad.epsilon = 1.5;
  CHECK_THROWS_AS(BuildPolicies(bad, tree, 10), ConfigError);
  CHECK_THROWS_AS(BuildPolicies(PolicySpec{}, tree, 0), ConfigError);

  PolicySpec eg;
  eg.kind = PolicyKind::kNormalizedEg;
  set = BuildPolicies(eg, tree, 100000);
  CHECK(dynamic_cast<NormalizedEgPolicy&>(*set[0]).state().eta ==
        doctest::Approx(NormalizedEgEta(100000, 2)));
}
