#pragma once

// Monte-Carlo moments of the eps-EXP3 importance estimate z[j] at one node with
// theta, v and the child costs frozen. A sample is one round: the node gets the
// job with probability v, draws its mode and child, and z[j] is the estimate
// when child j was chosen and 0 otherwise.

#include <cmath>
#include <vector>

#include "mstage/policy.h"
#include "mstage/rng.h"

namespace mstage::testing {

struct EstimatorCase {
  NodePolicyState state;
  double v = 1.0;
  std::vector<double> y;  // child costs
  int child = 0;          // the j whose estimate is checked
};

struct Moment {
  double mean = 0.0;
  double expected = 0.0;
  double std_error = 0.0;
  double z_score() const {
    return std_error > 0.0 ? std::abs(mean - expected) / std_error
                           : (mean == expected ? 0.0 : INFINITY);
  }
};

struct EstimatorMoments {
  Moment first;
  Moment second;
};

// Closed-form second moment: (eps |C| + (1-eps) sum_k e^(eta theta_k) /
// e^(eta theta_j)) y^2 / v.
inline double SecondMomentClosedForm(const EstimatorCase& c) {
  const auto& s = c.state;
  double ratio = 0.0;
  for (double th : s.theta) ratio += std::exp(s.eta * (th - s.theta[c.child]));
  const double k = s.fanout();
  const double y = c.y[c.child];
  return (s.epsilon * k + (1.0 - s.epsilon) * ratio) * y * y / c.v;
}

inline EstimatorMoments SimulateEstimator(const EstimatorCase& c, long samples,
                                          NodeRng& rng) {
  double s1 = 0.0, s2 = 0.0, s4 = 0.0;
  for (long i = 0; i < samples; ++i) {
    double z = 0.0;
    if (Uniform01(rng) < c.v) {
      const ModeDraw d = Eexp3Select(c.state, rng);
      if (d.child == c.child) z = Eexp3Estimate(c.state, d, c.y[d.child], c.v);
    }
    const double z2 = z * z;
    s1 += z;
    s2 += z2;
    s4 += z2 * z2;
  }
  const double n = static_cast<double>(samples);
  EstimatorMoments m;
  m.first.mean = s1 / n;
  m.first.expected = c.y[c.child];
  m.first.std_error = std::sqrt(std::max(s2 / n - m.first.mean * m.first.mean, 0.0) / n);
  m.second.mean = s2 / n;
  m.second.expected = SecondMomentClosedForm(c);
  m.second.std_error =
      std::sqrt(std::max(s4 / n - m.second.mean * m.second.mean, 0.0) / n);
  return m;
}

// Random case: D in {2, 4}, theta spread over a few units, moderate eta, eps
// and v bounded away from 0 so 10^6 samples give a usable standard error.
inline EstimatorCase RandomEstimatorCase(NodeRng& rng) {
  EstimatorCase c;
  const int fanout = Uniform01(rng) < 0.5 ? 2 : 4;
  PolicyParams p;
  p.eta = 0.05 + 0.95 * Uniform01(rng);
  p.epsilon = 0.05 + 0.9 * Uniform01(rng);
  c.state = NodePolicyState(fanout, p);
  for (double& th : c.state.theta) th = -3.0 * Uniform01(rng);
  c.v = 0.2 + 0.8 * Uniform01(rng);
  c.y.resize(fanout);
  for (double& y : c.y) y = Uniform01(rng);
  c.child = static_cast<int>(Uniform01(rng) * fanout);
  return c;
}

}  // namespace mstage::testing
