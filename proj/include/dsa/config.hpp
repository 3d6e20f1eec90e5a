// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration files (JSON). Unknown keys are rejected at every
// level; parse errors carry the line number of the offending byte.

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsa/data.hpp"
#include "dsa/error.hpp"
#include "dsa/flow.hpp"

namespace dsa {

struct ExperimentConfig {
  std::string source;      // path the config was read from, if any
  std::string graph_path;  // resolved against the config directory
  data::DatasetSpec dataset;
  flow::FlowConfig flow;
  std::string output_dir = "out";
  std::string precision = "float";  // float | double
};

namespace config_detail {

class Reader {
 public:
  Reader(const nlohmann::json& j, std::string where, std::vector<std::string>& errors)
      : j_(j), where_(std::move(where)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(where_ + ": expected an object");
  }

  ~Reader() = default;

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
      if constexpr (std::is_integral_v<V> && !std::is_same_v<V, bool>) {
        if (!j_.at(key).is_number_integer()) throw std::invalid_argument("not an integer");
      }
    } catch (const std::exception&) {
      errors_.push_back(path(key) + ": wrong type (" + std::string(j_.at(key).type_name()) + ")");
    }
  }

  template <typename V>
  void require(const char* key, V& out) {
    if (!j_.is_object() || !j_.contains(key)) errors_.push_back(path(key) + ": missing required key");
    get(key, out);
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) errors_.push_back(path(k.c_str()) + ": unknown key");
    }
  }

  std::string path(const char* key) const { return where_.empty() ? std::string(key) : where_ + "." + key; }

 private:
  const nlohmann::json& j_;
  std::string where_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

inline int line_of(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

}  // namespace config_detail

/// Builds an ExperimentConfig from parsed JSON. `base_dir` anchors relative
/// graph and dataset paths.
inline ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  using config_detail::Reader;
  std::vector<std::string> errors;
  ExperimentConfig cfg;
  auto& f = cfg.flow;

  Reader top(j, "", errors);
  top.require("graph", cfg.graph_path);
  top.get("output_dir", cfg.output_dir);
  top.get("precision", cfg.precision);
  top.require("budget_fraction", f.budget_fraction);
  top.get("seed", f.seed);
  top.get("warmup_epochs", f.warmup_epochs);
  top.get("total_epochs", f.total_epochs);
  top.get("val_fraction", f.val_fraction);
  top.get("weight_steps_per_alloc", f.weight_steps_per_alloc);
  top.get("mc_samples", f.mc_samples);
  top.get("batch_size", f.batch_size);
  top.get("lr", f.lr);
  top.get("lr_milestones", f.lr_milestones);
  top.get("lr_decay", f.lr_decay);
  top.get("momentum", f.momentum);
  top.get("weight_decay", f.weight_decay);
  top.get("channel_floor", f.channel_floor);
  top.get("sensitivity_ratios", f.sensitivity_ratios);

  if (const auto* b = top.child("beta2")) {
    Reader r(*b, "beta2", errors);
    r.get("initial", f.beta2.initial);
    r.get("multiplier", f.beta2.multiplier);
    r.finish();
  }
  if (const auto* a = top.child("admm")) {
    Reader r(*a, "admm", errors);
    r.get("rho1", f.alloc.rho1);
    r.get("rho2", f.alloc.rho2);
    r.get("eta_z", f.alloc.eta_z);
    r.get("inner_steps", f.alloc.inner_steps);
    r.get("lv_scale", f.alloc.lv_scale);
    r.get("lr_theta", f.alloc.lr_theta);
    r.get("nonneg_projection", f.alloc.nonneg_projection);
    r.get("budget_scale", f.alloc.budget_scale);
    r.get("square_hinge", f.alloc.square_hinge);
    r.get("initial_keep", f.alloc.initial_keep);
    r.finish();
  }

  auto& d = cfg.dataset;
  d.seed = f.seed;
  if (const auto* ds = top.child("dataset")) {
    Reader r(*ds, "dataset", errors);
    r.require("kind", d.kind);
    r.get("path", d.path);
    r.get("train_subset", d.train_subset);
    r.get("test_subset", d.test_subset);
    r.get("seed", d.seed);
    r.get("mean", d.mean);
    r.get("std", d.stddev);
    r.get("checksums", d.checksums);
    r.get("synthetic_train", d.synthetic_train);
    r.get("synthetic_test", d.synthetic_test);
    if (const auto* s = r.child("synthetic")) {
      Reader rs(*s, "dataset.synthetic", errors);
      auto& o = d.synthetic;
      rs.get("num_classes", o.num_classes);
      rs.get("channels", o.channels);
      rs.get("height", o.height);
      rs.get("width", o.width);
      rs.get("templates_per_class", o.templates_per_class);
      rs.get("blobs_per_template", o.blobs_per_template);
      rs.get("max_shift", o.max_shift);
      rs.get("noise", o.noise);
      rs.finish();
    }
    r.finish();
  } else {
    errors.push_back("dataset: missing required key");
  }
  top.finish();

  if (errors.empty()) {
    for (auto& v : f.violations()) errors.push_back(v);
    if (cfg.precision != "float" && cfg.precision != "double") errors.push_back("precision must be float or double");
    if (d.kind != "synthetic" && d.kind != "mnist" && d.kind != "cifar10") {
      errors.push_back("dataset.kind must be synthetic, mnist or cifar10");
    }
    if (d.kind != "synthetic" && d.path.empty()) errors.push_back("dataset.path is required for " + d.kind);
    if (d.train_subset < 0 || d.test_subset < 0) errors.push_back("dataset subsets must be >= 0");
    if (d.kind == "synthetic" && (d.synthetic_train < 10 || d.synthetic_test < 1)) {
      errors.push_back("synthetic dataset sizes too small");
    }
  }
  if (!errors.empty()) {
    std::string msg;
    for (const auto& e : errors) msg += (msg.empty() ? "" : "; ") + e;
    throw ConfigError(msg);
  }

  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative() && !base_dir.empty()) p = (base_dir / p).string();
  };
  resolve(cfg.graph_path);
  resolve(d.path);
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& name = "<config>",
                                          const std::filesystem::path& base_dir = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    const int line = config_detail::line_of(text, e.byte == 0 ? 0 : e.byte - 1);
    throw ConfigError(name + ":" + std::to_string(line) + ": " + e.what());
  }
  try {
    auto cfg = config_from_json(j, base_dir);
    cfg.source = name;
    return cfg;
  } catch (const ConfigError& e) {
    throw ConfigError(name + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path, std::filesystem::path(path).parent_path());
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  auto j = flow::to_json(c.flow);
  j["graph"] = c.graph_path;
  j["output_dir"] = c.output_dir;
  j["precision"] = c.precision;
  const auto& d = c.dataset;
  j["dataset"] = {{"kind", d.kind},
                  {"path", d.path},
                  {"train_subset", d.train_subset},
                  {"test_subset", d.test_subset},
                  {"seed", d.seed},
                  {"mean", d.mean},
                  {"std", d.stddev},
                  {"checksums", d.checksums},
                  {"synthetic_train", d.synthetic_train},
                  {"synthetic_test", d.synthetic_test},
                  {"synthetic",
                   {{"num_classes", d.synthetic.num_classes},
                    {"channels", d.synthetic.channels},
                    {"height", d.synthetic.height},
                    {"width", d.synthetic.width},
                    {"templates_per_class", d.synthetic.templates_per_class},
                    {"blobs_per_template", d.synthetic.blobs_per_template},
                    {"max_shift", d.synthetic.max_shift},
                    {"noise", d.synthetic.noise}}}};
  return j;
}

}  // namespace dsa
