#include "mstage/topology.h"

#include <algorithm>
#include <charconv>
#include <deque>
#include <sstream>

#include "mstage/errors.h"

namespace mstage {

TreeTopology TreeTopology::FromChildren(
    std::vector<std::vector<NodeId>> children, std::vector<std::string> labels) {
  const int n = static_cast<int>(children.size());
  if (n < 2) throw ConfigError("topology needs a root and at least one leaf");
  if (!labels.empty() && static_cast<int>(labels.size()) != n) {
    throw ConfigError("topology label count does not match node count");
  }

  TreeTopology t;
  t.parent_.assign(n, kNoNode);
  for (NodeId i = 0; i < n; ++i) {
    for (NodeId c : children[i]) {
      if (c < 0 || c >= n) {
        throw ConfigError("node " + std::to_string(i) + " lists unknown child " +
                          std::to_string(c));
      }
      if (c == 0) throw ConfigError("the root (node 0) cannot be a child");
      if (t.parent_[c] != kNoNode) {
        throw ConfigError("node " + std::to_string(c) + " has two parents");
      }
      t.parent_[c] = i;
    }
  }
  if (children[0].empty()) throw ConfigError("the root has no children");

  // Breadth-first walk from the root assigns hop counts and detects
  // unreachable nodes (which would otherwise form a cycle or a forest).
  t.hops_.assign(n, -1);
  t.hops_[0] = 0;
  std::vector<NodeId> order;
  order.reserve(n);
  std::deque<NodeId> queue{0};
  while (!queue.empty()) {
    NodeId u = queue.front();
    queue.pop_front();
    order.push_back(u);
    for (NodeId c : children[u]) {
      t.hops_[c] = t.hops_[u] + 1;
      queue.push_back(c);
    }
  }
  if (static_cast<int>(order.size()) != n) {
    throw ConfigError("topology is not a single tree rooted at node 0");
  }

  t.children_ = std::move(children);
  t.bottom_up_.assign(order.rbegin(), order.rend());
  t.leaf_index_.assign(n, -1);
  int leaf_depth = -1;
  for (NodeId i = 0; i < n; ++i) {
    const int fanout = static_cast<int>(t.children_[i].size());
    t.max_fanout_ = std::max(t.max_fanout_, fanout);
    if (fanout == 0) {
      t.leaf_index_[i] = static_cast<int>(t.leaves_.size());
      t.leaves_.push_back(i);
      if (leaf_depth >= 0 && leaf_depth != t.hops_[i]) t.uniform_depth_ = false;
      leaf_depth = std::max(leaf_depth, t.hops_[i]);
      t.depth_ = std::max(t.depth_, t.hops_[i]);
    }
  }

  if (labels.empty()) {
    labels.reserve(n);
    for (NodeId i = 0; i < n; ++i) labels.push_back(std::to_string(i));
  }
  t.labels_ = std::move(labels);
  return t;
}

void TreeTopology::CheckId(NodeId n) const {
  if (n < 0 || n >= node_count()) {
    throw std::out_of_range("unknown node id " + std::to_string(n));
  }
}

const std::vector<NodeId>& TreeTopology::children(NodeId n) const {
  CheckId(n);
  return children_[n];
}

NodeId TreeTopology::parent(NodeId n) const {
  CheckId(n);
  return parent_[n];
}

bool TreeTopology::is_leaf(NodeId n) const {
  CheckId(n);
  return children_[n].empty();
}

bool TreeTopology::children_all_leaves(NodeId n) const {
  CheckId(n);
  return std::all_of(children_[n].begin(), children_[n].end(),
                     [&](NodeId c) { return children_[c].empty(); });
}

int TreeTopology::hops_from_root(NodeId n) const {
  CheckId(n);
  return hops_[n];
}

const std::string& TreeTopology::label(NodeId n) const {
  CheckId(n);
  return labels_[n];
}

int TreeTopology::leaf_index(NodeId n) const {
  CheckId(n);
  return leaf_index_[n];
}

int TreeTopology::child_position(NodeId parent, NodeId child) const {
  CheckId(parent);
  const auto& c = children_[parent];
  auto it = std::find(c.begin(), c.end(), child);
  return it == c.end() ? -1 : static_cast<int>(it - c.begin());
}

std::vector<NodeId> TreeTopology::path_from_root(NodeId n) const {
  CheckId(n);
  std::vector<NodeId> path;
  for (NodeId u = n; u != kNoNode; u = parent_[u]) path.push_back(u);
  std::reverse(path.begin(), path.end());
  return path;
}

std::string TreeTopology::ToAdjacencyText() const {
  std::ostringstream out;
  for (NodeId i = 0; i < node_count(); ++i) {
    if (children_[i].empty()) continue;
    out << i << ':';
    for (NodeId c : children_[i]) out << ' ' << c;
    out << '\n';
  }
  return out.str();
}

TreeTopology BuildUniformTree(int fanout, int depth) {
  if (fanout < 2) throw ConfigError("fanout D must be >= 2");
  if (depth < 1) throw ConfigError("depth L must be >= 1");
  long long count = 1, level = 1;
  for (int d = 0; d < depth; ++d) {
    level *= fanout;
    count += level;
    if (count > 50'000'000) throw ConfigError("uniform tree is too large");
  }
  const long long internal = count - level;
  std::vector<std::vector<NodeId>> children(count);
  // Breadth-first numbering: children of node i are D*i+1 .. D*i+D.
  for (long long i = 0; i < internal; ++i) {
    children[i].reserve(fanout);
    for (int k = 1; k <= fanout; ++k) {
      children[i].push_back(static_cast<NodeId>(fanout * i + k));
    }
  }
  return TreeTopology::FromChildren(std::move(children));
}

TreeTopology BuildChainTree(int depth) {
  if (depth < 2) throw ConfigError("chain depth L must be >= 2");
  const int L = depth;
  const int n = 2 * L + 1;
  std::vector<std::vector<NodeId>> children(n);
  std::vector<std::string> labels(n);
  // id = label - 1.
  for (int label = 1; label < L; ++label) {
    children[label - 1] = {static_cast<NodeId>(L + label - 1),
                           static_cast<NodeId>(label)};
  }
  children[L - 1] = {static_cast<NodeId>(2 * L - 1),
                     static_cast<NodeId>(2 * L)};
  for (int i = 0; i < n; ++i) labels[i] = std::to_string(i + 1);
  return TreeTopology::FromChildren(std::move(children), std::move(labels));
}

int HopsFromRoot(const TreeTopology& tree, NodeId n) {
  return tree.hops_from_root(n);
}

namespace {

std::string_view Trim(std::string_view s) {
  const auto ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

NodeId ParseId(std::string_view tok, int line_no) {
  NodeId v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || v < 0) {
    throw ConfigError("adjacency line " + std::to_string(line_no) +
                      ": bad node id '" + std::string(tok) + "'");
  }
  return v;
}

}  // namespace

TreeTopology ParseAdjacency(std::string_view text) {
  std::vector<std::pair<NodeId, std::vector<NodeId>>> rows;
  NodeId max_id = -1;
  int line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = Trim(line);
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string_view::npos) {
      throw ConfigError("adjacency line " + std::to_string(line_no) +
                        ": expected 'id: child ...'");
    }
    const NodeId id = ParseId(Trim(line.substr(0, colon)), line_no);
    max_id = std::max(max_id, id);
    std::vector<NodeId> kids;
    std::string_view rest = Trim(line.substr(colon + 1));
    while (!rest.empty()) {
      const auto sp = rest.find_first_of(" \t,");
      kids.push_back(ParseId(rest.substr(0, sp), line_no));
      max_id = std::max(max_id, kids.back());
      rest = sp == std::string_view::npos ? std::string_view{}
                                          : Trim(rest.substr(sp + 1));
      while (!rest.empty() && rest.front() == ',') rest = Trim(rest.substr(1));
    }
    rows.emplace_back(id, std::move(kids));
  }
  if (max_id < 0) throw ConfigError("adjacency description is empty");
  std::vector<std::vector<NodeId>> children(max_id + 1);
  std::vector<bool> seen(max_id + 1, false);
  for (auto& [id, kids] : rows) {
    if (seen[id]) {
      throw ConfigError("adjacency lists node " + std::to_string(id) + " twice");
    }
    seen[id] = true;
    children[id] = std::move(kids);
  }
  return TreeTopology::FromChildren(std::move(children));
}

}  // namespace mstage
