#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace mstage {

// Dense node index in [0, node_count). The root is always 0.
using NodeId = std::int32_t;

inline constexpr NodeId kNoNode = -1;

// Immutable rooted tree describing a multi-stage system. Non-leaf nodes are
// agents choosing among their children; leaves are the terminal outcomes
// whose costs the environment generates. Safe to share across threads.
class TreeTopology {
 public:
  // Validates and builds a tree from per-node child lists. Node 0 must be the
  // root; every other node needs exactly one parent and must be reachable.
  // `labels` are display names (defaults to the decimal id).
  static TreeTopology FromChildren(std::vector<std::vector<NodeId>> children,
                                   std::vector<std::string> labels = {});

  int node_count() const { return static_cast<int>(children_.size()); }
  // Number of non-leaf levels: leaves sit at most this many hops from root.
  int depth() const { return depth_; }
  int max_fanout() const { return max_fanout_; }
  bool is_uniform_depth() const { return uniform_depth_; }

  const std::vector<NodeId>& children(NodeId n) const;
  NodeId parent(NodeId n) const;
  bool is_leaf(NodeId n) const;
  bool children_all_leaves(NodeId n) const;
  int hops_from_root(NodeId n) const;
  const std::string& label(NodeId n) const;

  // Leaves in increasing id order; cost vectors are indexed by position here.
  const std::vector<NodeId>& leaves() const { return leaves_; }
  int leaf_count() const { return static_cast<int>(leaves_.size()); }
  // Position of `n` in leaves(), or -1 for non-leaves.
  int leaf_index(NodeId n) const;

  // Position of `child` among children(parent), or -1.
  int child_position(NodeId parent, NodeId child) const;

  // Node ids ordered so every node appears after all of its descendants.
  const std::vector<NodeId>& bottom_up_order() const { return bottom_up_; }

  // Root-to-node path, inclusive of both ends.
  std::vector<NodeId> path_from_root(NodeId n) const;

  // `id: child child ...` per line; inverse of ParseAdjacency.
  std::string ToAdjacencyText() const;

 private:
  TreeTopology() = default;
  void CheckId(NodeId n) const;

  std::vector<std::vector<NodeId>> children_;
  std::vector<NodeId> parent_;
  std::vector<int> hops_;
  std::vector<int> leaf_index_;
  std::vector<NodeId> leaves_;
  std::vector<NodeId> bottom_up_;
  std::vector<std::string> labels_;
  int depth_ = 0;
  int max_fanout_ = 0;
  bool uniform_depth_ = true;
};

// Complete D-ary tree with L non-leaf levels, ids assigned breadth first.
TreeTopology BuildUniformTree(int fanout, int depth);

// Lower-bound chain: non-leaf nodes labelled 1..L, leaves L+1..2L+1. Node i<L
// has children (leaf L+i, node i+1); node L has leaves 2L and 2L+1. Ids are
// label - 1, so the root (label 1) is id 0.
TreeTopology BuildChainTree(int depth);

int HopsFromRoot(const TreeTopology& tree, NodeId n);

// Parses the adjacency text format:
//   # comment
//   0: 1 2
//   1: 3 4
// Nodes never listed on the left are leaves; ids must be dense from 0.
TreeTopology ParseAdjacency(std::string_view text);

}  // namespace mstage
