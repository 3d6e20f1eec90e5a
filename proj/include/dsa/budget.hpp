// SPDX-License-Identifier: Apache-2.0
//
// Quadratic FLOPs budget model F(A) = A^T F_A A + F_B^T A over per-group keep
// ratios A, plus an exact integer recount for hard-pruned architectures.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsa/error.hpp"
#include "dsa/graph.hpp"
#include "dsa/grouping.hpp"

namespace dsa {

struct BudgetModel {
  int num_groups = 0;
  std::vector<double> fa;  // K x K, row-major
  std::vector<double> fb;  // K

  BudgetModel() = default;
  explicit BudgetModel(int k)
      : num_groups(k), fa(static_cast<std::size_t>(k) * k, 0.0), fb(k, 0.0) {}

  double& a(int row, int col) { return fa[static_cast<std::size_t>(row) * num_groups + col]; }
  double a(int row, int col) const { return fa[static_cast<std::size_t>(row) * num_groups + col]; }

  double full_flops() const {
    double total = 0.0;
    for (double v : fa) total += v;
    for (double v : fb) total += v;
    return total;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"K", num_groups}, {"F_A", fa}, {"F_B", fb}, {"full_flops", full_flops()}};
  }

  static BudgetModel from_json(const nlohmann::json& doc) {
    BudgetModel m;
    try {
      m.num_groups = doc.at("K").get<int>();
      m.fa = doc.at("F_A").get<std::vector<double>>();
      m.fb = doc.at("F_B").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw BudgetError(std::string("malformed budget model JSON: ") + e.what());
    }
    if (m.num_groups < 0 || m.fa.size() != static_cast<std::size_t>(m.num_groups) * m.num_groups ||
        m.fb.size() != static_cast<std::size_t>(m.num_groups)) {
      throw BudgetError("budget model dimensions disagree with K");
    }
    return m;
  }
};

namespace detail {

inline void check_dims(const BudgetModel& model, std::size_t n) {
  if (n != static_cast<std::size_t>(model.num_groups)) {
    throw BudgetError("keep-ratio vector has " + std::to_string(n) + " entries, budget model has " +
                      std::to_string(model.num_groups) + " groups");
  }
}

}  // namespace detail

/// Builds F_A and F_B by walking each convolution's predecessors back to the
/// nearest channel-producing node (conv, depthwise conv or INPUT), passing
/// through CONCAT (all operands) and channel-wise nodes (first operand).
/// FLOPs are 2x MACs. A DENSE classifier is budgeted as an unpruned 1x1 conv.
inline BudgetModel build_flops_model(const NetGraph& graph, const GroupAssignment& groups) {
  BudgetModel model(groups.num_groups);
  for (std::size_t mi : graph.topological_order()) {
    const Node& m = graph.node(mi);
    if (m.kind == NodeKind::kDepthwiseConv) {
      model.fb[groups[mi]] += 2.0 * m.channels * m.kss() * m.oss();
      continue;
    }
    if (m.kind != NodeKind::kNormalConv && m.kind != NodeKind::kDense) continue;

    const bool dense = m.kind == NodeKind::kDense;
    const double per_in_channel = 2.0 * m.channels * m.kss() * m.oss();
    std::vector<std::size_t> stack(m.inputs.begin(), m.inputs.end());
    while (!stack.empty()) {
      const std::size_t ni = stack.back();
      stack.pop_back();
      const Node& n = graph.node(ni);
      if (n.kind == NodeKind::kConcat) {
        for (std::size_t p : n.inputs) stack.push_back(p);
      } else if (is_channelwise(n.kind)) {
        stack.push_back(n.inputs.front());
      } else if (is_conv(n.kind)) {
        const double coeff = per_in_channel * n.channels;
        if (dense) {
          model.fb[groups[ni]] += coeff;
        } else {
          model.a(groups[mi], groups[ni]) += coeff;
        }
      } else if (n.kind == NodeKind::kInput) {
        if (dense) {
          throw BudgetError("DENSE '" + m.id + "' reads the network input directly; its FLOPs would be constant");
        }
        model.fb[groups[mi]] += per_in_channel * n.channels;
      } else {
        throw BudgetError("'" + m.id + "' consumes the output of DENSE '" + n.id +
                          "'; only a terminal classifier may be dense");
      }
    }
  }
  return model;
}

inline double eval_budget(const BudgetModel& model, std::span<const double> alpha) {
  detail::check_dims(model, alpha.size());
  const int k = model.num_groups;
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    double row = 0.0;
    for (int j = 0; j < k; ++j) row += model.a(i, j) * alpha[j];
    total += alpha[i] * row + model.fb[i] * alpha[i];
  }
  return total;
}

/// Gradient (F_A + F_A^T) A + F_B.
inline std::vector<double> eval_budget_grad(const BudgetModel& model, std::span<const double> alpha) {
  detail::check_dims(model, alpha.size());
  const int k = model.num_groups;
  std::vector<double> grad(model.fb);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      grad[i] += (model.a(i, j) + model.a(j, i)) * alpha[j];
    }
  }
  return grad;
}

/// Exact FLOPs of the network when group k keeps kept[k] output channels in
/// every member convolution. Channel counts are propagated forward through the
/// graph and every conv/dense layer is counted directly.
inline std::int64_t count_pruned_flops(const NetGraph& graph, const GroupAssignment& groups,
                                       std::span<const int> kept) {
  if (kept.size() != static_cast<std::size_t>(groups.num_groups)) {
    throw BudgetError("kept-channel vector length does not match group count");
  }
  std::vector<std::int64_t> out_ch(graph.size(), 0);
  std::int64_t total = 0;
  for (std::size_t i : graph.topological_order()) {
    const Node& n = graph.node(i);
    switch (n.kind) {
      case NodeKind::kInput:
        out_ch[i] = n.channels;
        break;
      case NodeKind::kNormalConv:
        out_ch[i] = kept[groups[i]];
        total += 2 * out_ch[n.inputs[0]] * out_ch[i] * n.kss() * n.oss();
        break;
      case NodeKind::kDepthwiseConv:
        out_ch[i] = kept[groups[i]];
        total += 2 * out_ch[i] * n.kss() * n.oss();
        break;
      case NodeKind::kDense:
        out_ch[i] = n.channels;
        total += 2 * out_ch[n.inputs[0]] * out_ch[i];
        break;
      case NodeKind::kConcat:
        for (std::size_t p : n.inputs) out_ch[i] += out_ch[p];
        break;
      default:
        out_ch[i] = out_ch[n.inputs[0]];
    }
  }
  return total;
}

inline std::int64_t count_full_flops(const NetGraph& graph, const GroupAssignment& groups) {
  return count_pruned_flops(graph, groups, groups.channels(graph));
}

}  // namespace dsa
