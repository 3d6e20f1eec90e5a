// SPDX-License-Identifier: Apache-2.0
//
// Topological grouping: convolutions that must share a keep ratio and mask so
// that shortcut additions stay shape-consistent after pruning.

#pragma once

#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsa/error.hpp"
#include "dsa/graph.hpp"

namespace dsa {

struct GroupAssignment {
  std::vector<int> group_of;  // per graph node; -1 for nodes that are not convolutions
  int num_groups = 0;

  int operator[](std::size_t node) const { return group_of.at(node); }

  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> out(num_groups);
    for (std::size_t i = 0; i < group_of.size(); ++i) {
      if (group_of[i] >= 0) out[group_of[i]].push_back(i);
    }
    return out;
  }

  /// Per-group channel count. Throws when the members of a group disagree,
  /// which only happens for unusual topologies such as a depthwise
  /// convolution behind a CONCAT.
  std::vector<int> channels(const NetGraph& graph) const {
    std::vector<int> out(num_groups, 0);
    for (std::size_t i = 0; i < group_of.size(); ++i) {
      const int k = group_of[i];
      if (k < 0) continue;
      const int c = graph.node(i).channels;
      if (out[k] == 0) {
        out[k] = c;
      } else if (out[k] != c) {
        throw GraphError("group " + std::to_string(k) + " mixes channel counts " +
                         std::to_string(out[k]) + " and " + std::to_string(c));
      }
    }
    return out;
  }

  nlohmann::json to_json(const NetGraph& graph) const {
    // Members are listed in topological order so the output does not depend
    // on node positions in the source document.
    std::vector<std::vector<std::string>> ids(num_groups);
    for (std::size_t i : graph.topological_order()) {
      if (group_of.at(i) >= 0) ids[group_of[i]].push_back(graph.node(i).id);
    }
    nlohmann::json groups = ids;
    return nlohmann::json{{"K", num_groups}, {"groups", groups}};
  }
};

namespace detail {

class DisjointSets {
 public:
  explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace detail

/// Removes the incoming edges of split nodes and labels the convolutions of
/// every remaining connected component with one group index. Group indices
/// follow the graph's id-stable topological order.
inline GroupAssignment topological_group(const NetGraph& graph) {
  detail::DisjointSets sets(graph.size());
  for (std::size_t j = 0; j < graph.size(); ++j) {
    const Node& n = graph.node(j);
    if (is_split(n.kind)) continue;
    for (std::size_t p : n.inputs) sets.unite(p, j);
  }

  GroupAssignment out;
  out.group_of.assign(graph.size(), -1);
  std::vector<int> label(graph.size(), -1);
  for (std::size_t i : graph.topological_order()) {
    if (!is_conv(graph.node(i).kind)) continue;
    const std::size_t root = sets.find(i);
    if (label[root] < 0) label[root] = out.num_groups++;
    out.group_of[i] = label[root];
  }
  return out;
}

}  // namespace dsa
