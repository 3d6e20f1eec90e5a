// SPDX-License-Identifier: Apache-2.0
//
// File-level entry points shared by the CLI and the acceptance harness.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsa/checkpoint.hpp"
#include "dsa/config.hpp"
#include "dsa/data.hpp"
#include "dsa/flow.hpp"
#include "dsa/graph.hpp"

namespace dsa {

inline const std::vector<std::string>& run_artifacts() {
  static const std::vector<std::string> names{"report.json", "metrics.csv", "model.ckpt", "warmup.ckpt",
                                              "sensitivity.json", "alignment.csv"};
  return names;
}

/// Creates `dir`, refusing to touch earlier artifacts unless `overwrite`.
inline void prepare_output_dir(const std::filesystem::path& dir, bool overwrite) {
  namespace fs = std::filesystem;
  for (const auto& name : run_artifacts()) {
    const auto p = dir / name;
    if (!fs::exists(p)) continue;
    if (!overwrite) throw Error("output_exists", "'" + p.string() + "' exists; pass --overwrite to replace it");
    fs::remove(p);
  }
  fs::create_directories(dir);
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw Error("io_error", "cannot write '" + p.string() + "'");
  out << text;
}

template <typename T>
std::map<std::string, Tensor<T>> mask_extras(const nn::MaskSet& masks) {
  std::map<std::string, Tensor<T>> extras;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    Tensor<T> t({static_cast<int>(masks[k].size())});
    for (std::size_t c = 0; c < masks[k].size(); ++c) t.data[c] = static_cast<T>(masks[k][c]);
    extras.emplace("mask/" + std::to_string(k), std::move(t));
  }
  return extras;
}

template <typename T>
nn::MaskSet masks_from_extras(const std::map<std::string, Tensor<T>>& extras, int num_groups) {
  nn::MaskSet masks(num_groups);
  for (int k = 0; k < num_groups; ++k) {
    const auto it = extras.find("mask/" + std::to_string(k));
    if (it == extras.end()) continue;
    masks[k].assign(it->second.data.begin(), it->second.data.end());
  }
  return masks;
}

template <typename T>
flow::RunResult<T> run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, bool overwrite) {
  const NetGraph graph = NetGraph::load(cfg.graph_path);
  prepare_output_dir(out_dir, overwrite);
  const auto data = data::load_dataset<T>(cfg.dataset, cfg.flow.val_fraction);
  auto result = flow::run_dsa<T>(cfg.flow, graph, data);
  result.report.config = to_json(cfg);
  write_text(out_dir / "report.json", result.report.to_json().dump(2) + "\n");
  write_text(out_dir / "metrics.csv", flow::metrics_csv(result.report));
  save_checkpoint((out_dir / "model.ckpt").string(), graph, result.model, mask_extras<T>(result.masks));
  save_checkpoint((out_dir / "warmup.ckpt").string(), graph, result.warmup_model);
  return result;
}

struct SensitivityOutput {
  flow::SensitivityTable table;
  std::vector<double> grad_magnitudes;
  flow::AlignmentData alignment;

  nlohmann::json to_json() const {
    auto j = table.to_json();
    j["grad_magnitudes"] = grad_magnitudes;
    j["grad_normalized"] = alignment.grad_norm;
    j["sensitivity_normalized"] = alignment.sens_norm;
    j["spearman"] = alignment.spearman_rho;
    return j;
  }
};

/// Sensitivity table on the test split plus |dL/dalpha| on the validation
/// split at the allocator's starting point, for the model in `checkpoint`.
template <typename T>
SensitivityOutput run_sensitivity(const ExperimentConfig& cfg, const std::string& checkpoint,
                                  const std::filesystem::path& out_dir = {}) {
  const NetGraph graph = NetGraph::load(cfg.graph_path);
  const auto data = data::load_dataset<T>(cfg.dataset, cfg.flow.val_fraction);
  auto ck = load_checkpoint<T>(checkpoint, graph);
  nn::Executor<T> ex(graph, topological_group(graph));
  SensitivityOutput out;
  out.table = flow::sensitivity_analysis(ex, ck.model, data.test, cfg.flow.sensitivity_ratios, cfg.flow.batch_size);
  const std::vector<double> alpha(ex.groups().num_groups, cfg.flow.alloc.initial_keep);
  out.grad_magnitudes = flow::alpha_gradient_magnitudes(ex, ck.model, data.train, data.val_idx, alpha,
                                                        cfg.flow.beta2.at(cfg.flow.warmup_epochs),
                                                        cfg.flow.batch_size);
  if (out_dir.empty()) {
    out.alignment = flow::alignment_data(out.grad_magnitudes, out.table.mean_drop);
  } else {
    std::filesystem::create_directories(out_dir);
    out.alignment =
        flow::emit_alignment_data(out.grad_magnitudes, out.table.mean_drop, (out_dir / "alignment.csv").string());
    write_text(out_dir / "sensitivity.json", out.to_json().dump(2) + "\n");
  }
  return out;
}

}  // namespace dsa
