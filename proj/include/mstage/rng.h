#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <span>

namespace mstage {

// Per-node learner streams. One engine per node, seeded from (run seed, node id).
using NodeRng = std::mt19937_64;

// SplitMix64 finalizer; used to derive independent seeds from structured keys.
constexpr std::uint64_t Mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t DeriveSeed(std::uint64_t a, std::uint64_t b) {
  return Mix64(a ^ Mix64(b + 0x632be59bd9b4e019ULL));
}

constexpr std::uint64_t DeriveSeed(std::uint64_t a, std::uint64_t b,
                                   std::uint64_t c) {
  return DeriveSeed(DeriveSeed(a, b), c);
}

// Counter-keyed generator for per-round environment draws: the stream for
// round t is a pure function of (env seed, t), independent of call order.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

using EnvRng = SplitMix64;

// Uniform double in [0, 1) with 53 random bits.
template <typename Engine>
double Uniform01(Engine& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Index drawn from a probability vector. Zero-probability entries are never
// returned, even when rounding leaves the cumulative sum short of 1.
inline int SampleIndex(std::span<const double> probs, double u) {
  double acc = 0.0;
  int last_positive = -1;
  for (int i = 0; i < static_cast<int>(probs.size()); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last_positive = i;
    if (u < acc) return i;
  }
  return last_positive;
}

}  // namespace mstage
