// SPDX-License-Identifier: Apache-2.0
//
// Computation DAG of a convolutional network. Nodes carry channel counts and
// spatial sizes; shapes are inferred once at construction so every consumer
// (grouping, budget model, executor) sees the same numbers.

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <queue>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dsa/error.hpp"

namespace dsa {

enum class NodeKind {
  kInput,
  kNormalConv,
  kDepthwiseConv,
  kDense,
  kConcat,
  kAdd,
  kRelu,
  kBatchNorm,
  kPool,
};

enum class PoolMode { kAvg, kMax };

inline const char* to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::kInput: return "INPUT";
    case NodeKind::kNormalConv: return "NORMAL_CONV";
    case NodeKind::kDepthwiseConv: return "DEPTHWISE_CONV";
    case NodeKind::kDense: return "DENSE";
    case NodeKind::kConcat: return "CONCAT";
    case NodeKind::kAdd: return "ADD";
    case NodeKind::kRelu: return "RELU";
    case NodeKind::kBatchNorm: return "BN";
    case NodeKind::kPool: return "POOL";
  }
  return "?";
}

inline NodeKind node_kind_from_string(const std::string& s) {
  static const std::pair<const char*, NodeKind> kTable[] = {
      {"INPUT", NodeKind::kInput},
      {"NORMAL_CONV", NodeKind::kNormalConv},
      {"DEPTHWISE_CONV", NodeKind::kDepthwiseConv},
      {"DENSE", NodeKind::kDense},
      {"CONCAT", NodeKind::kConcat},
      {"ADD", NodeKind::kAdd},
      {"RELU", NodeKind::kRelu},
      {"BN", NodeKind::kBatchNorm},
      {"POOL", NodeKind::kPool},
  };
  for (const auto& [name, kind] : kTable) {
    if (s == name) return kind;
  }
  throw GraphError("unknown node kind '" + s + "'");
}

inline bool is_conv(NodeKind k) {
  return k == NodeKind::kNormalConv || k == NodeKind::kDepthwiseConv;
}

// Split nodes mix channels, so channel identity does not survive them.
// DENSE is budgeted as a 1x1 normal convolution and therefore splits too.
inline bool is_split(NodeKind k) {
  return k == NodeKind::kNormalConv || k == NodeKind::kConcat || k == NodeKind::kDense;
}

// Channel-wise nodes whose output channel i depends only on input channel i
// of their first predecessor.
inline bool is_channelwise(NodeKind k) {
  return k == NodeKind::kAdd || k == NodeKind::kRelu || k == NodeKind::kBatchNorm ||
         k == NodeKind::kPool;
}

struct Node {
  std::string id;
  NodeKind kind = NodeKind::kInput;
  std::vector<std::size_t> inputs;  // ordered predecessors

  int channels = 0;  // output channel count C
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int height = 0;  // output spatial size, inferred except for INPUT
  int width = 0;

  bool bn = true;    // conv only: Conv-BN-ReLU fusion flags
  bool relu = true;
  PoolMode pool_mode = PoolMode::kAvg;
  bool global_pool = false;

  std::int64_t kss() const { return static_cast<std::int64_t>(kernel) * kernel; }
  std::int64_t oss() const { return static_cast<std::int64_t>(height) * width; }
};

/// Directed acyclic computation graph with validated, shape-inferred nodes.
///
/// Construction rejects cycles, dangling edges, arity violations and ADD nodes
/// whose operands disagree in channel count or spatial size.
class NetGraph {
 public:
  NetGraph() = default;

  explicit NetGraph(std::vector<Node> nodes) : nodes_(std::move(nodes)) {
    index_ids();
    check_arity();
    order_ = compute_topological_order();
    infer_shapes();
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Deterministic topological order; ties are broken by node id so the order
  /// does not depend on how nodes were listed.
  const std::vector<std::size_t>& topological_order() const { return order_; }

  std::size_t index_of(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw GraphError("unknown node id '" + id + "'");
    return it->second;
  }

  std::vector<std::size_t> successors(std::size_t i) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < nodes_.size(); ++j) {
      for (std::size_t p : nodes_[j].inputs) {
        if (p == i) {
          out.push_back(j);
          break;
        }
      }
    }
    return out;
  }

  /// The unique node without consumers; its output is the logits tensor.
  std::size_t sink() const {
    std::vector<bool> consumed(nodes_.size(), false);
    for (const auto& n : nodes_) {
      for (std::size_t p : n.inputs) consumed[p] = true;
    }
    std::size_t found = nodes_.size();
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!consumed[i]) {
        if (found != nodes_.size()) throw GraphError("graph has more than one output node");
        found = i;
      }
    }
    if (found == nodes_.size()) throw GraphError("graph has no output node");
    return found;
  }

  std::vector<std::size_t> conv_nodes() const {
    std::vector<std::size_t> out;
    for (std::size_t i : order_) {
      if (is_conv(nodes_[i].kind)) out.push_back(i);
    }
    return out;
  }

  static NetGraph from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;

  static NetGraph load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw GraphError("cannot open graph file '" + path + "'");
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw GraphError("graph file '" + path + "': " + e.what());
    }
    return from_json(doc);
  }

 private:
  void index_ids() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].id.empty()) throw GraphError("node without id");
      if (!by_id_.emplace(nodes_[i].id, i).second) {
        throw GraphError("duplicate node id '" + nodes_[i].id + "'");
      }
      for (std::size_t p : nodes_[i].inputs) {
        if (p >= nodes_.size()) throw GraphError("edge into '" + nodes_[i].id + "' from unknown node");
        if (p == i) throw GraphError("graph is cyclic (self loop at '" + nodes_[i].id + "')");
      }
    }
  }

  void check_arity() const {
    for (const auto& n : nodes_) {
      const auto arity = n.inputs.size();
      switch (n.kind) {
        case NodeKind::kInput:
          if (arity != 0) throw GraphError("INPUT '" + n.id + "' must not have predecessors");
          break;
        case NodeKind::kAdd:
          if (arity < 2) throw GraphError("ADD '" + n.id + "' needs at least two predecessors");
          break;
        case NodeKind::kConcat:
          if (arity < 1) throw GraphError("CONCAT '" + n.id + "' needs predecessors");
          break;
        default:
          if (arity != 1) {
            throw GraphError(std::string(to_string(n.kind)) + " '" + n.id +
                             "' needs exactly one predecessor");
          }
      }
    }
  }

  std::vector<std::size_t> compute_topological_order() const {
    const std::size_t n = nodes_.size();
    std::vector<std::size_t> indegree(n, 0);
    std::vector<std::vector<std::size_t>> succ(n);
    for (std::size_t j = 0; j < n; ++j) {
      indegree[j] = nodes_[j].inputs.size();
      for (std::size_t p : nodes_[j].inputs) succ[p].push_back(j);
    }
    auto later = [this](std::size_t a, std::size_t b) { return nodes_[a].id > nodes_[b].id; };
    std::priority_queue<std::size_t, std::vector<std::size_t>, decltype(later)> ready(later);
    for (std::size_t i = 0; i < n; ++i) {
      if (indegree[i] == 0) ready.push(i);
    }
    std::vector<std::size_t> order;
    order.reserve(n);
    while (!ready.empty()) {
      const std::size_t i = ready.top();
      ready.pop();
      order.push_back(i);
      for (std::size_t j : succ[i]) {
        // Multi-edges count once per listing, matching indegree.
        if (--indegree[j] == 0) ready.push(j);
      }
    }
    if (order.size() != n) throw GraphError("graph is cyclic");
    return order;
  }

  void infer_shapes() {
    for (std::size_t i : order_) {
      Node& n = nodes_[i];
      auto in = [&](std::size_t k) -> const Node& { return nodes_[n.inputs[k]]; };
      const std::string where = std::string(to_string(n.kind)) + " '" + n.id + "'";
      switch (n.kind) {
        case NodeKind::kInput:
          if (n.channels <= 0) throw GraphError(where + ": channel count must be positive");
          if (n.height <= 0 || n.width <= 0) throw GraphError(where + ": spatial size must be positive");
          break;
        case NodeKind::kNormalConv:
        case NodeKind::kDepthwiseConv: {
          if (n.kind == NodeKind::kDepthwiseConv) {
            if (n.channels == 0) n.channels = in(0).channels;
            if (n.channels != in(0).channels) {
              throw GraphError(where + ": depthwise channel count must equal its input's");
            }
          }
          if (n.channels <= 0) throw GraphError(where + ": channel count must be positive");
          if (n.kernel <= 0 || n.stride <= 0 || n.pad < 0) throw GraphError(where + ": bad kernel geometry");
          n.height = (in(0).height + 2 * n.pad - n.kernel) / n.stride + 1;
          n.width = (in(0).width + 2 * n.pad - n.kernel) / n.stride + 1;
          if (in(0).height + 2 * n.pad < n.kernel || in(0).width + 2 * n.pad < n.kernel) {
            throw GraphError(where + ": kernel larger than padded input");
          }
          break;
        }
        case NodeKind::kDense:
          if (n.channels <= 0) throw GraphError(where + ": channel count must be positive");
          if (in(0).height != 1 || in(0).width != 1) {
            throw GraphError(where + ": input must be spatially 1x1 (use a global POOL first)");
          }
          n.kernel = 1;
          n.height = n.width = 1;
          break;
        case NodeKind::kRelu:
        case NodeKind::kBatchNorm:
          n.channels = in(0).channels;
          n.height = in(0).height;
          n.width = in(0).width;
          break;
        case NodeKind::kPool:
          n.channels = in(0).channels;
          if (n.global_pool) {
            n.height = n.width = 1;
          } else {
            if (n.kernel <= 0 || n.stride <= 0) throw GraphError(where + ": bad pool geometry");
            if (in(0).height < n.kernel || in(0).width < n.kernel) throw GraphError(where + ": pool larger than input");
            n.height = (in(0).height - n.kernel) / n.stride + 1;
            n.width = (in(0).width - n.kernel) / n.stride + 1;
          }
          break;
        case NodeKind::kAdd:
          n.channels = in(0).channels;
          n.height = in(0).height;
          n.width = in(0).width;
          for (std::size_t k = 1; k < n.inputs.size(); ++k) {
            if (in(k).channels != n.channels) {
              throw GraphError(where + ": mismatched predecessor channels (" + std::to_string(n.channels) +
                               " vs " + std::to_string(in(k).channels) + ")");
            }
            if (in(k).height != n.height || in(k).width != n.width) {
              throw GraphError(where + ": mismatched predecessor spatial size");
            }
          }
          break;
        case NodeKind::kConcat:
          n.channels = 0;
          n.height = in(0).height;
          n.width = in(0).width;
          for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            if (in(k).height != n.height || in(k).width != n.width) {
              throw GraphError(where + ": mismatched predecessor spatial size");
            }
            n.channels += in(k).channels;
          }
          break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::vector<std::size_t> order_;
};

// JSON layout:
//   {"nodes": [{"id": "x", "kind": "INPUT", "channels": 1, "height": 16, "width": 16},
//              {"id": "c1", "kind": "NORMAL_CONV", "inputs": ["x"], "channels": 8,
//               "kernel": 3, "stride": 1, "pad": 1, "bn": true, "relu": true}, ...],
//    "edges": [["c1", "add"], ...]}
// Predecessor order is the node's "inputs" list followed by "edges" entries in
// document order.
inline NetGraph NetGraph::from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("nodes") || !doc["nodes"].is_array()) {
    throw GraphError("graph JSON must be an object with a 'nodes' array");
  }
  static const char* kKnownKeys[] = {"id", "kind", "inputs", "channels", "kernel", "stride", "pad",
                                     "height", "width", "bn", "relu", "mode", "global"};
  std::vector<Node> nodes;
  std::unordered_map<std::string, std::size_t> ids;
  std::vector<std::vector<std::string>> pending_inputs;
  try {
    for (const auto& jn : doc["nodes"]) {
      for (const auto& [key, _] : jn.items()) {
        if (std::find_if(std::begin(kKnownKeys), std::end(kKnownKeys),
                         [&](const char* k) { return key == k; }) == std::end(kKnownKeys)) {
          throw GraphError("unknown node attribute '" + key + "'");
        }
      }
      Node n;
      n.id = jn.at("id").get<std::string>();
      n.kind = node_kind_from_string(jn.at("kind").get<std::string>());
      n.channels = jn.value("channels", 0);
      const int default_kernel = is_conv(n.kind) ? 3 : (n.kind == NodeKind::kPool ? 2 : 1);
      n.kernel = jn.value("kernel", default_kernel);
      n.stride = jn.value("stride", n.kind == NodeKind::kPool ? n.kernel : 1);
      n.pad = jn.value("pad", is_conv(n.kind) ? n.kernel / 2 : 0);
      n.height = jn.value("height", n.kind == NodeKind::kInput ? 1 : 0);
      n.width = jn.value("width", n.kind == NodeKind::kInput ? 1 : 0);
      n.bn = jn.value("bn", true);
      n.relu = jn.value("relu", true);
      n.global_pool = jn.value("global", false);
      const std::string mode = jn.value("mode", std::string("avg"));
      if (mode == "avg") {
        n.pool_mode = PoolMode::kAvg;
      } else if (mode == "max") {
        n.pool_mode = PoolMode::kMax;
      } else {
        throw GraphError("unknown pool mode '" + mode + "'");
      }
      if (!ids.emplace(n.id, nodes.size()).second) throw GraphError("duplicate node id '" + n.id + "'");
      pending_inputs.push_back(jn.value("inputs", std::vector<std::string>{}));
      nodes.push_back(std::move(n));
    }
    if (doc.contains("edges")) {
      for (const auto& e : doc["edges"]) {
        if (!e.is_array() || e.size() != 2) throw GraphError("edge must be a [from, to] pair");
        const auto to = e[1].get<std::string>();
        auto it = ids.find(to);
        if (it == ids.end()) throw GraphError("edge into unknown node '" + to + "'");
        pending_inputs[it->second].push_back(e[0].get<std::string>());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw GraphError(std::string("malformed graph JSON: ") + e.what());
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& from : pending_inputs[i]) {
      auto it = ids.find(from);
      if (it == ids.end()) throw GraphError("edge from unknown node '" + from + "'");
      nodes[i].inputs.push_back(it->second);
    }
  }
  return NetGraph(std::move(nodes));
}

inline nlohmann::json NetGraph::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& n : nodes_) {
    nlohmann::json jn{{"id", n.id}, {"kind", to_string(n.kind)}};
    std::vector<std::string> inputs;
    for (std::size_t p : n.inputs) inputs.push_back(nodes_[p].id);
    if (!inputs.empty()) jn["inputs"] = inputs;
    switch (n.kind) {
      case NodeKind::kInput:
        jn["channels"] = n.channels;
        jn["height"] = n.height;
        jn["width"] = n.width;
        break;
      case NodeKind::kNormalConv:
      case NodeKind::kDepthwiseConv:
        jn["channels"] = n.channels;
        jn["kernel"] = n.kernel;
        jn["stride"] = n.stride;
        jn["pad"] = n.pad;
        jn["bn"] = n.bn;
        jn["relu"] = n.relu;
        break;
      case NodeKind::kDense:
        jn["channels"] = n.channels;
        break;
      case NodeKind::kPool:
        jn["mode"] = n.pool_mode == PoolMode::kAvg ? "avg" : "max";
        if (n.global_pool) {
          jn["global"] = true;
        } else {
          jn["kernel"] = n.kernel;
          jn["stride"] = n.stride;
        }
        break;
      default:
        break;
    }
    arr.push_back(std::move(jn));
  }
  return nlohmann::json{{"nodes", std::move(arr)}};
}

}  // namespace dsa
