#include "mstage/env.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <stdexcept>

#include "mstage/errors.h"

namespace mstage {

void CostEnvironment::ExpectedCosts(Round, std::span<double>) const {
  throw std::logic_error("environment does not expose expected costs");
}

std::vector<double> CostEnvironment::Costs(Round t, EnvRng& rng) const {
  std::vector<double> out(leaf_count());
  Costs(t, rng, out);
  return out;
}

std::vector<double> CostEnvironment::ExpectedCosts(Round t) const {
  std::vector<double> out(leaf_count());
  ExpectedCosts(t, out);
  return out;
}

// -- BernoulliTreeEnv ---------------------------------------------------------

BernoulliTreeEnv::BernoulliTreeEnv(std::vector<double> p, Round shift_round,
                                   int shift_leaf)
    : p_(std::move(p)), shift_round_(shift_round), shift_leaf_(shift_leaf) {
  if (p_.empty()) throw ConfigError("bernoulli env needs at least one leaf");
  for (double v : p_) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ConfigError("bernoulli leaf means must lie in [0,1]");
    }
  }
  if (shift_round_ > 0 &&
      (shift_leaf_ < 0 || shift_leaf_ >= static_cast<int>(p_.size()))) {
    throw ConfigError("shift leaf out of range");
  }
}

void BernoulliTreeEnv::ExpectedCosts(Round t, std::span<double> out) const {
  std::copy(p_.begin(), p_.end(), out.begin());
  if (shift_round_ > 0 && t >= shift_round_) out[shift_leaf_] = 0.0;
}

void BernoulliTreeEnv::Costs(Round t, EnvRng& rng, std::span<double> out) const {
  const bool shifted = shift_round_ > 0 && t >= shift_round_;
  for (int j = 0; j < leaf_count(); ++j) {
    const double p = (shifted && j == shift_leaf_) ? 0.0 : p_[j];
    out[j] = Uniform01(rng) < p ? 1.0 : 0.0;
  }
}

std::vector<double> BernoulliLadder(int leaf_count, double p_min) {
  if (leaf_count < 2) throw ConfigError("ladder needs at least two leaves");
  if (!(p_min >= 0.0 && p_min <= 1.0)) throw ConfigError("p_min must be in [0,1]");
  const int n = leaf_count;
  std::vector<double> p(n);
  p[0] = 1.0;
  const double step = (1.0 - p_min) / n;
  for (int j = 1; j < n; ++j) p[j] = p_min + (n - 1 - j) * step;
  return p;
}

BernoulliTreeEnv MakeBernoulliTreeEnv(const TreeTopology& tree, double p_min,
                                      Round horizon) {
  return BernoulliTreeEnv(BernoulliLadder(tree.leaf_count(), p_min),
                          std::max<Round>(1, horizon / 100), 0);
}

// -- LowerBoundChainEnv -------------------------------------------------------

LowerBoundChainEnv::LowerBoundChainEnv(int depth, double delta,
                                       bool best_last_leaf)
    : depth_(depth), delta_(delta) {
  if (depth < 2) throw ConfigError("chain depth L must be >= 2");
  const double scale = std::ldexp(1.0, depth);  // 2^L
  if (!(delta > 0.0 && delta < 1.0 / scale)) {
    throw ConfigError("delta must satisfy 0 < delta < 2^-L");
  }
  const int L = depth;
  p_.resize(L + 1);
  for (int label = L + 1; label <= 2 * L - 1; ++label) {
    p_[label - (L + 1)] =
        (1.0 - (scale - std::ldexp(1.0, label - L - 1)) * delta) / 2.0;
  }
  const double low = (1.0 - scale * delta) / 2.0;
  const double high = (1.0 + scale * delta) / 2.0;
  p_[L - 1] = best_last_leaf ? high : low;  // label 2L
  p_[L] = best_last_leaf ? low : high;      // label 2L+1
}

double LowerBoundChainEnv::mean_for_label(int label) const {
  if (label < depth_ + 1 || label > 2 * depth_ + 1) {
    throw std::out_of_range("label is not a leaf of the chain");
  }
  return p_[label - (depth_ + 1)];
}

double LowerBoundChainEnv::min_mean() const {
  return (1.0 - std::ldexp(1.0, depth_) * delta_) / 2.0;
}

void LowerBoundChainEnv::ExpectedCosts(Round, std::span<double> out) const {
  std::copy(p_.begin(), p_.end(), out.begin());
}

void LowerBoundChainEnv::Costs(Round, EnvRng& rng, std::span<double> out) const {
  for (int j = 0; j < leaf_count(); ++j) {
    out[j] = Uniform01(rng) < p_[j] ? 1.0 : 0.0;
  }
}

LowerBoundChainEnv MakeLowerBoundEnv(int depth, double delta,
                                     bool best_last_leaf) {
  return LowerBoundChainEnv(depth, delta, best_last_leaf);
}

// -- DeadlineLatencyEnv -------------------------------------------------------

double LinkSchedule::RateAt(Round t) const {
  if (horizon <= 1) return rate_start;
  const double frac = static_cast<double>(std::clamp<Round>(t, 1, horizon) - 1) /
                      static_cast<double>(horizon - 1);
  return rate_start + (rate_end - rate_start) * frac;
}

DeadlineLatencyEnv::DeadlineLatencyEnv(std::vector<LinkSchedule> links,
                                       std::vector<LatencyLeaf> leaves,
                                       double deadline)
    : links_(std::move(links)), leaves_(std::move(leaves)), deadline_(deadline) {
  if (leaves_.empty()) throw ConfigError("latency env needs leaves");
  if (!(deadline_ > 0.0)) throw ConfigError("deadline must be positive");
  for (const auto& l : links_) {
    if (!(l.rate_start > 0.0 && l.rate_end > 0.0)) {
      throw ConfigError("link rates must be positive");
    }
  }
  for (const auto& leaf : leaves_) {
    if (!(leaf.miss_rate >= 0.0 && leaf.miss_rate <= 1.0)) {
      throw ConfigError("miss rate must lie in [0,1]");
    }
    if (leaf.processing < 0.0) throw ConfigError("processing time must be >= 0");
    for (int k : leaf.links) {
      if (k < 0 || k >= static_cast<int>(links_.size())) {
        throw ConfigError("leaf references unknown link");
      }
    }
  }
}

void DeadlineLatencyEnv::Costs(Round t, EnvRng& rng, std::span<double> out) const {
  std::vector<double> delay(links_.size());
  for (std::size_t k = 0; k < links_.size(); ++k) {
    delay[k] = -std::log1p(-Uniform01(rng)) / links_[k].RateAt(t);
  }
  for (int j = 0; j < leaf_count(); ++j) {
    const auto& leaf = leaves_[j];
    double latency = leaf.processing;
    for (int k : leaf.links) latency += delay[k];
    out[j] = latency > deadline_ ? 1.0 : leaf.miss_rate;
  }
}

void DeadlineLatencyEnv::ExpectedCosts(Round t, std::span<double> out) const {
  std::vector<double> rates;
  for (int j = 0; j < leaf_count(); ++j) {
    const auto& leaf = leaves_[j];
    rates.clear();
    for (int k : leaf.links) rates.push_back(links_[k].RateAt(t));
    const double late =
        SumOfExponentialsSurvival(rates, deadline_ - leaf.processing);
    out[j] = late + (1.0 - late) * leaf.miss_rate;
  }
}

double SumOfExponentialsSurvival(std::span<const double> rates, double s) {
  if (s < 0.0) return 1.0;
  if (rates.empty()) return 0.0;
  const double uni = *std::max_element(rates.begin(), rates.end());
  const double mean = uni * s;
  if (mean == 0.0) return 1.0;
  const int n = static_cast<int>(rates.size());
  // pi[k]: probability the embedded chain is in transient phase k after m
  // uniformized jumps.
  std::vector<double> pi(n, 0.0);
  pi[0] = 1.0;
  const int max_jumps =
      static_cast<int>(mean + 12.0 * std::sqrt(mean) + 40.0 + n);
  double survival = 0.0;
  for (int m = 0; m <= max_jumps; ++m) {
    const double log_w = -mean + m * std::log(mean) - std::lgamma(m + 1.0);
    const double w = std::exp(log_w);
    double alive = 0.0;
    for (double v : pi) alive += v;
    survival += w * alive;
    if (alive < 1e-300) break;
    for (int k = n - 1; k >= 0; --k) {
      const double move = rates[k] / uni;
      const double leave = pi[k] * move;
      pi[k] -= leave;
      if (k + 1 < n) pi[k + 1] += leave;
    }
  }
  return std::clamp(survival, 0.0, 1.0);
}

DeadlineLatencyEnv MakeMecEnv(const TreeTopology& tree, Round horizon,
                              const LatencyScenarioOptions& options) {
  if (!tree.is_uniform_depth() || tree.depth() != 2) {
    throw ConfigError("mec scenario needs a uniform tree with L=2");
  }
  if (options.profiles.empty()) throw ConfigError("mec needs processing profiles");
  std::vector<LinkSchedule> links;
  std::vector<LatencyLeaf> leaves(tree.leaf_count());
  const auto& servers = tree.children(0);
  for (std::size_t s = 0; s < servers.size(); ++s) {
    const bool ramps = s % 2 == 1;
    links.push_back(ramps ? LinkSchedule{options.ramp_start, options.ramp_end,
                                         horizon}
                          : LinkSchedule{options.constant_rate,
                                         options.constant_rate, horizon});
    const auto& nets = tree.children(servers[s]);
    for (std::size_t k = 0; k < nets.size(); ++k) {
      const auto& prof = options.profiles[k % options.profiles.size()];
      auto& leaf = leaves[tree.leaf_index(nets[k])];
      leaf.links = {static_cast<int>(s)};
      leaf.processing = prof.time;
      leaf.miss_rate = prof.miss_rate;
    }
  }
  return DeadlineLatencyEnv(std::move(links), std::move(leaves),
                            options.deadline);
}

DeadlineLatencyEnv MakeMultihopEnv(const TreeTopology& tree, Round horizon,
                                   const LatencyScenarioOptions& options) {
  if (!tree.is_uniform_depth()) {
    throw ConfigError("multihop scenario needs a uniform-depth tree");
  }
  const int L = tree.depth();
  const int D = tree.max_fanout();
  for (NodeId n = 0; n < tree.node_count(); ++n) {
    if (!tree.is_leaf(n) && static_cast<int>(tree.children(n).size()) != D) {
      throw ConfigError("multihop scenario needs a complete D-ary tree");
    }
  }
  auto schedule = [&](bool ramps) {
    return ramps ? LinkSchedule{options.ramp_start, options.ramp_end, horizon}
                 : LinkSchedule{options.constant_rate, options.constant_rate,
                                horizon};
  };
  // Physical link table: layer 0 is source -> relay(1, b); layer k in 1..L-1
  // is relay(k, a) -> relay(k+1, b); layer L is relay(L, a) -> destination.
  std::vector<LinkSchedule> links;
  auto hop_index = [&](int k, int a, int b) {
    if (k == 0) return b;
    if (k == L) return D + (L - 1) * D * D + a;
    return D + (k - 1) * D * D + a * D + b;
  };
  for (int b = 0; b < D; ++b) links.push_back(schedule(b % 2 == 1));
  for (int k = 1; k < L; ++k) {
    for (int a = 0; a < D; ++a) {
      for (int b = 0; b < D; ++b) links.push_back(schedule((a + b + k) % 2 == 1));
    }
  }
  for (int a = 0; a < D; ++a) links.push_back(schedule((a + L) % 2 == 1));

  std::vector<LatencyLeaf> leaves(tree.leaf_count());
  for (NodeId leaf_id : tree.leaves()) {
    const auto path = tree.path_from_root(leaf_id);
    // Relay chosen at layer k is the child position taken at hop k-1.
    std::vector<int> relay(L + 1, 0);
    for (int k = 1; k <= L; ++k) {
      relay[k] = tree.child_position(path[k - 1], path[k]);
    }
    LatencyLeaf& leaf = leaves[tree.leaf_index(leaf_id)];
    leaf.links.push_back(hop_index(0, 0, relay[1]));
    for (int k = 1; k < L; ++k) {
      leaf.links.push_back(hop_index(k, relay[k], relay[k + 1]));
    }
    leaf.links.push_back(hop_index(L, relay[L], 0));
  }
  return DeadlineLatencyEnv(std::move(links), std::move(leaves),
                            options.deadline);
}

// -- CsvReplayEnv -------------------------------------------------------------

CsvReplayEnv::CsvReplayEnv(std::vector<std::vector<double>> rows)
    : rows_(std::move(rows)) {
  if (rows_.empty()) throw ConfigError("cost matrix has no rows");
  leaf_count_ = static_cast<int>(rows_.front().size());
  for (const auto& r : rows_) {
    if (static_cast<int>(r.size()) != leaf_count_) {
      throw ConfigError("cost matrix rows have different lengths");
    }
    for (double c : r) {
      if (!(c >= 0.0 && c <= 1.0)) throw ConfigError("replayed costs must lie in [0,1]");
    }
  }
}

void CsvReplayEnv::Costs(Round t, EnvRng&, std::span<double> out) const {
  if (t < 1 || t > rounds()) {
    throw std::out_of_range("round " + std::to_string(t) +
                            " is beyond the replayed cost matrix");
  }
  const auto& row = rows_[t - 1];
  std::copy(row.begin(), row.end(), out.begin());
}

namespace {

std::vector<std::string_view> SplitCsvLine(std::string_view line) {
  std::vector<std::string_view> cells;
  while (true) {
    const auto comma = line.find(',');
    auto cell = line.substr(0, comma);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) {
      cell.remove_prefix(1);
    }
    while (!cell.empty() &&
           (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) {
      cell.remove_suffix(1);
    }
    cells.push_back(cell);
    if (comma == std::string_view::npos) break;
    line = line.substr(comma + 1);
  }
  return cells;
}

}  // namespace

CsvReplayEnv ParseCostCsv(std::string_view text, const TreeTopology& tree) {
  std::vector<std::string_view> lines;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    auto line = text.substr(0, nl);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) lines.push_back(line);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
  }
  if (lines.size() < 2) throw ConfigError("cost csv needs a header and rows");
  const auto header = SplitCsvLine(lines[0]);
  if (static_cast<int>(header.size()) != tree.leaf_count()) {
    throw ConfigError("cost csv header must list every leaf exactly once");
  }
  std::vector<int> column_to_leaf(header.size());
  std::vector<bool> seen(tree.leaf_count(), false);
  for (std::size_t c = 0; c < header.size(); ++c) {
    NodeId id = -1;
    auto [p, ec] = std::from_chars(header[c].data(),
                                   header[c].data() + header[c].size(), id);
    if (ec != std::errc() || p != header[c].data() + header[c].size() ||
        id < 0 || id >= tree.node_count() || tree.leaf_index(id) < 0) {
      throw ConfigError("cost csv header names unknown leaf '" +
                        std::string(header[c]) + "'");
    }
    const int pos = tree.leaf_index(id);
    if (seen[pos]) throw ConfigError("cost csv header repeats a leaf");
    seen[pos] = true;
    column_to_leaf[c] = pos;
  }
  std::vector<std::vector<double>> rows;
  rows.reserve(lines.size() - 1);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = SplitCsvLine(lines[i]);
    if (cells.size() != header.size()) {
      throw ConfigError("cost csv row " + std::to_string(i) + " has " +
                        std::to_string(cells.size()) + " cells");
    }
    std::vector<double> row(header.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      double v = 0.0;
      auto [p, ec] =
          std::from_chars(cells[c].data(), cells[c].data() + cells[c].size(), v);
      if (ec != std::errc() || p != cells[c].data() + cells[c].size()) {
        throw ConfigError("cost csv row " + std::to_string(i) +
                          ": bad number '" + std::string(cells[c]) + "'");
      }
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ConfigError("cost csv row " + std::to_string(i) +
                          ": cost outside [0,1]");
      }
      row[column_to_leaf[c]] = v;
    }
    rows.push_back(std::move(row));
  }
  return CsvReplayEnv(std::move(rows));
}

}  // namespace mstage
