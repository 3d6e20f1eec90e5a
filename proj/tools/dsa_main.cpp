// SPDX-License-Identifier: Apache-2.0
//
// dsa: command-line front end.
//
//   dsa run <config.json> [--out DIR] [--seed N] [--budget F] [--overwrite]
//   dsa sensitivity <config.json> <checkpoint> [--out DIR]
//   dsa budget <graph.json> [--alpha a0,a1,...] [--budget F]
//   dsa group <graph.json>

#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dsa/budget.hpp"
#include "dsa/config.hpp"
#include "dsa/error.hpp"
#include "dsa/experiment.hpp"
#include "dsa/graph.hpp"
#include "dsa/grouping.hpp"

namespace {

int fail(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << "\n";
  return 1;
}

std::vector<double> parse_csv(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    while (used < item.size() && std::isspace(static_cast<unsigned char>(item[used]))) ++used;
    if (item.empty() || used != item.size()) throw dsa::ConfigError("--alpha: '" + item + "' is not a number");
    out.push_back(v);
  }
  return out;
}

template <typename T>
nlohmann::json run_summary(const dsa::flow::RunResult<T>& r, const std::string& out_dir) {
  const auto& f = r.report.final;
  return {{"output_dir", out_dir},
          {"test_acc", f.test_acc},
          {"flops_ratio", static_cast<double>(f.exact_flops) / f.full_flops},
          {"kept", f.kept},
          {"channels", f.channels}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable sparsity allocation for structured channel pruning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DSA_VERSION);

  std::string config_path, config_flag, out_dir, checkpoint, graph_path, alpha_csv;
  std::uint64_t seed = 0;
  double budget = 0.0;
  bool overwrite = false;

  auto* run = app.add_subcommand("run", "Train, allocate keep ratios and hard-prune under a FLOPs budget");
  run->add_option("CONFIG", config_path, "Experiment config (JSON)");
  run->add_option("--config", config_flag, "Experiment config (JSON)");
  run->add_option("--out", out_dir, "Output directory (overrides output_dir)");
  auto* seed_opt = run->add_option("--seed", seed, "Random seed (overrides seed)");
  auto* run_budget = run->add_option("--budget", budget, "FLOPs budget fraction in (0, 1]");
  run->add_flag("--overwrite", overwrite, "Replace artifacts from an earlier run");

  auto* sens = app.add_subcommand("sensitivity", "Per-group pruning sensitivity and gradient alignment");
  sens->add_option("config", config_path, "Experiment config (JSON)")->required();
  sens->add_option("checkpoint", checkpoint, "Model checkpoint")->required();
  sens->add_option("--out", out_dir, "Directory for sensitivity.json and alignment.csv");

  auto* bud = app.add_subcommand("budget", "FLOPs of a graph at given keep ratios");
  bud->add_option("graph", graph_path, "Graph JSON")->required();
  bud->add_option("--alpha", alpha_csv, "Comma-separated keep ratios, one per group (default all ones)");
  auto* bud_budget = bud->add_option("--budget", budget, "Budget fraction to test feasibility against");

  auto* grp = app.add_subcommand("group", "Print the channel groups of a graph");
  grp->add_option("graph", graph_path, "Graph JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << nlohmann::json{{"error", "usage_error"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }

  try {
    if (run->parsed()) {
      if (!config_path.empty() && !config_flag.empty()) return fail("usage_error", "config given twice");
      const std::string path = config_path.empty() ? config_flag : config_path;
      if (path.empty()) return fail("usage_error", "run: a config file is required");
      auto cfg = dsa::load_config(path);
      if (*seed_opt) {
        cfg.flow.seed = seed;
        cfg.dataset.seed = seed;
      }
      if (*run_budget) {
        cfg.flow.budget_fraction = budget;
        cfg.flow.validate();
      }
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      if (cfg.precision == "double") {
        std::cout << run_summary(dsa::run_experiment<double>(cfg, cfg.output_dir, overwrite), cfg.output_dir).dump(2)
                  << "\n";
      } else {
        std::cout << run_summary(dsa::run_experiment<float>(cfg, cfg.output_dir, overwrite), cfg.output_dir).dump(2)
                  << "\n";
      }
    } else if (sens->parsed()) {
      const auto cfg = dsa::load_config(config_path);
      const auto out = cfg.precision == "double" ? dsa::run_sensitivity<double>(cfg, checkpoint, out_dir)
                                                 : dsa::run_sensitivity<float>(cfg, checkpoint, out_dir);
      std::cout << out.to_json().dump(2) << "\n";
    } else if (bud->parsed()) {
      const auto graph = dsa::NetGraph::load(graph_path);
      const auto groups = dsa::topological_group(graph);
      const auto model = dsa::build_flops_model(graph, groups);
      std::vector<double> alpha(groups.num_groups, 1.0);
      if (!alpha_csv.empty()) alpha = parse_csv(alpha_csv);
      const double flops = dsa::eval_budget(model, alpha);
      nlohmann::json j{{"num_groups", groups.num_groups},
                       {"alpha", alpha},
                       {"flops", flops},
                       {"full_flops", model.full_flops()},
                       {"ratio", flops / model.full_flops()},
                       {"model", model.to_json()}};
      if (*bud_budget) {
        if (!(budget > 0.0 && budget <= 1.0)) return fail("config_error", "--budget must lie in (0, 1]");
        j["budget_flops"] = budget * model.full_flops();
        j["feasible"] = flops <= budget * model.full_flops();
      }
      std::cout << j.dump(2) << "\n";
    } else if (grp->parsed()) {
      const auto graph = dsa::NetGraph::load(graph_path);
      std::cout << dsa::topological_group(graph).to_json(graph).dump(2) << "\n";
    }
  } catch (const dsa::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal_error", e.what());
  }
  return 0;
}
