// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "dsa/config.hpp"

using dsa::ConfigError;
using dsa::parse_config_text;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text, "cfg.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

const char* kMinimal = R"({"graph": "g.json", "dataset": {"kind": "synthetic"}, "budget_fraction": 0.5})";

}  // namespace

TEST(Config, MinimalUsesDefaults) {
  const auto c = parse_config_text(kMinimal);
  EXPECT_EQ(c.graph_path, "g.json");
  EXPECT_EQ(c.dataset.kind, "synthetic");
  EXPECT_EQ(c.flow.budget_fraction, 0.5);
  EXPECT_EQ(c.flow.warmup_epochs, 20);
  EXPECT_EQ(c.flow.total_epochs, 300);
  EXPECT_EQ(c.flow.batch_size, 128);
  EXPECT_EQ(c.flow.weight_steps_per_alloc, 20);
  EXPECT_EQ(c.flow.val_fraction, 0.1);
  EXPECT_EQ(c.flow.lr_milestones, (std::vector<int>{120, 180, 240}));
  EXPECT_EQ(c.flow.alloc.rho1, 0.01);
  EXPECT_EQ(c.flow.alloc.rho2, 0.01);
  EXPECT_EQ(c.flow.alloc.inner_steps, 50);
  EXPECT_EQ(c.flow.alloc.eta_z, 1e-3);
  EXPECT_EQ(c.flow.alloc.lv_scale, 1e5);
  EXPECT_EQ(c.flow.beta2.initial, 0.05);
  EXPECT_EQ(c.flow.beta2.multiplier, 1.1);
  EXPECT_EQ(c.precision, "float");
}

TEST(Config, NestedValuesParsed) {
  const auto c = parse_config_text(R"({
    "graph": "g.json", "budget_fraction": 0.3, "seed": 9,
    "dataset": {"kind": "mnist", "path": "/data/mnist", "train_subset": 100,
                "checksums": {"train-images-idx3-ubyte": "ab"}},
    "admm": {"lv_scale": 10.0, "inner_steps": 5},
    "beta2": {"multiplier": 1.5}
  })");
  EXPECT_EQ(c.flow.seed, 9u);
  EXPECT_EQ(c.dataset.seed, 9u);
  EXPECT_EQ(c.dataset.path, "/data/mnist");
  EXPECT_EQ(c.dataset.train_subset, 100);
  EXPECT_EQ(c.dataset.checksums.at("train-images-idx3-ubyte"), "ab");
  EXPECT_EQ(c.flow.alloc.lv_scale, 10.0);
  EXPECT_EQ(c.flow.alloc.inner_steps, 5);
  EXPECT_EQ(c.flow.beta2.multiplier, 1.5);
  EXPECT_EQ(c.flow.beta2.initial, 0.05);
}

TEST(Config, UnknownKeysRejectedAtEveryLevel) {
  EXPECT_NE(error_of(R"({"graph": "g", "dataset": {"kind": "synthetic"}, "budget_fraction": 0.5, "bugdet": 1})")
                .find("bugdet: unknown key"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"graph": "g", "dataset": {"kind": "synthetic", "pth": "x"}, "budget_fraction": 0.5})")
                .find("dataset.pth: unknown key"),
            std::string::npos);
  EXPECT_NE(
      error_of(R"({"graph": "g", "dataset": {"kind": "synthetic"}, "budget_fraction": 0.5, "admm": {"rho": 1}})")
          .find("admm.rho: unknown key"),
      std::string::npos);
}

TEST(Config, MissingAndMistypedKeys) {
  EXPECT_NE(error_of(R"({"dataset": {"kind": "synthetic"}, "budget_fraction": 0.5})").find("graph: missing"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"graph": "g", "budget_fraction": 0.5})").find("dataset: missing"), std::string::npos);
  EXPECT_NE(error_of(R"({"graph": "g", "dataset": {"kind": "synthetic"}, "budget_fraction": "half"})")
                .find("budget_fraction: wrong type"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"graph": "g", "dataset": {"kind": "synthetic"}, "budget_fraction": 0.5, "batch_size": 1.5})")
                .find("batch_size: wrong type"),
            std::string::npos);
  EXPECT_NE(error_of("[1, 2]").find("expected an object"), std::string::npos);
}

TEST(Config, RangeViolations) {
  EXPECT_NE(error_of(R"({"graph": "g", "dataset": {"kind": "synthetic"}, "budget_fraction": 1.5})")
                .find("budget_fraction must lie in (0, 1]"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"graph": "g", "dataset": {"kind": "cifar10"}, "budget_fraction": 0.5})")
                .find("dataset.path is required"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"graph": "g", "dataset": {"kind": "svhn"}, "budget_fraction": 0.5})").find("dataset.kind"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"graph": "g", "dataset": {"kind": "synthetic"}, "budget_fraction": 0.5, "precision": "half"})")
                .find("precision"),
            std::string::npos);
}

TEST(Config, ParseErrorsCarryLineNumbers) {
  const std::string text = "{\n  \"graph\": \"g\",\n  \"budget_fraction\": 0.5,,\n}\n";
  const auto msg = error_of(text);
  EXPECT_EQ(msg.rfind("cfg.json:3:", 0), 0u) << msg;
  EXPECT_EQ(error_of("").rfind("cfg.json:1:", 0), 0u);
}

TEST(Config, RelativePathsResolveAgainstConfigDirectory) {
  const auto c = parse_config_text(
      R"({"graph": "graphs/g.json", "dataset": {"kind": "mnist", "path": "data"}, "budget_fraction": 0.5})", "x",
      "/base/dir");
  EXPECT_EQ(c.graph_path, "/base/dir/graphs/g.json");
  EXPECT_EQ(c.dataset.path, "/base/dir/data");
  const auto abs = parse_config_text(R"({"graph": "/abs/g.json", "dataset": {"kind": "synthetic"}, "budget_fraction": 0.5})",
                                     "x", "/base/dir");
  EXPECT_EQ(abs.graph_path, "/abs/g.json");
}

TEST(Config, JsonRoundTrip) {
  auto c = parse_config_text(kMinimal);
  c.flow.alloc.lv_scale = 42.0;
  c.dataset.synthetic.noise = 0.3;
  c.flow.sensitivity_ratios = {0.5};
  const auto back = dsa::config_from_json(dsa::to_json(c));
  EXPECT_EQ(dsa::to_json(back), dsa::to_json(c));
}

TEST(Config, ShippedExperimentsParse) {
  for (const auto& entry : std::filesystem::directory_iterator(std::string(DSA_FIXTURE_DIR) + "/experiments")) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(dsa::load_config(entry.path().string())) << entry.path();
  }
  EXPECT_THROW(dsa::load_config("/nonexistent/config.json"), ConfigError);
}
