// SPDX-License-Identifier: Apache-2.0
//
// End-to-end driver: warmup training, alternating keep-ratio allocation and
// weight updates until the FLOPs budget is met, continued training while the
// keep probabilities sharpen, hard finalization, and the sensitivity versus
// gradient-magnitude analysis.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsa/admm.hpp"
#include "dsa/budget.hpp"
#include "dsa/data.hpp"
#include "dsa/error.hpp"
#include "dsa/graph.hpp"
#include "dsa/grouping.hpp"
#include "dsa/nn.hpp"
#include "dsa/prune.hpp"

#ifndef DSA_VERSION
#define DSA_VERSION "0.0.0"
#endif

namespace dsa::flow {

inline constexpr int kReportSchema = 1;

struct FlowConfig {
  int warmup_epochs = 20;
  int total_epochs = 300;
  double budget_fraction = 0.5;
  double val_fraction = 0.1;
  int weight_steps_per_alloc = 20;
  int mc_samples = 1;
  int batch_size = 128;
  std::uint64_t seed = 0;
  double lr = 0.05;
  std::vector<int> lr_milestones{120, 180, 240};
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  prune::Beta2Schedule beta2{};
  admm::AllocOptions alloc{};
  bool channel_floor = true;  // keep one channel instead of aborting on empty groups
  std::vector<double> sensitivity_ratios{0.25, 0.5, 0.75};

  double lr_at(int epoch) const {
    double lr_e = lr;
    for (int m : lr_milestones) {
      if (epoch >= m) lr_e *= lr_decay;
    }
    return lr_e;
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (!(budget_fraction > 0.0 && budget_fraction <= 1.0)) v.push_back("budget_fraction must lie in (0, 1]");
    if (!(val_fraction > 0.0 && val_fraction < 0.5)) v.push_back("val_fraction must lie in (0, 0.5)");
    if (warmup_epochs < 0) v.push_back("warmup_epochs must be >= 0");
    if (total_epochs <= warmup_epochs) v.push_back("total_epochs must exceed warmup_epochs");
    if (weight_steps_per_alloc < 1) v.push_back("weight_steps_per_alloc must be >= 1");
    if (mc_samples < 1) v.push_back("mc_samples must be >= 1");
    if (batch_size < 2) v.push_back("batch_size must be >= 2");
    if (!(lr >= 0.0)) v.push_back("lr must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) v.push_back("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) v.push_back("weight_decay must be >= 0");
    if (!(beta2.initial > 0.0) || !(beta2.multiplier >= 1.0)) v.push_back("beta2 schedule must be positive and non-decreasing");
    if (!(alloc.rho1 >= 0.0 && alloc.rho2 >= 0.0)) v.push_back("admm penalties must be >= 0");
    if (!(alloc.eta_z > 0.0) || alloc.inner_steps < 1) v.push_back("admm inner loop needs eta_z > 0 and inner_steps >= 1");
    if (!(alloc.lr_theta > 0.0)) v.push_back("admm lr_theta must be > 0");
    if (!(alloc.budget_scale > 0.0)) v.push_back("admm budget_scale must be > 0");
    if (!(alloc.initial_keep > 0.0 && alloc.initial_keep < 1.0)) v.push_back("admm initial_keep must lie in (0, 1)");
    for (double r : sensitivity_ratios) {
      if (!(r > 0.0 && r <= 1.0)) v.push_back("sensitivity_ratios entries must lie in (0, 1]");
    }
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg;
    for (const auto& s : v) msg += (msg.empty() ? "" : "; ") + s;
    throw ConfigError(msg);
  }
};

inline nlohmann::json to_json(const FlowConfig& c) {
  const auto& a = c.alloc;
  return nlohmann::json{
      {"warmup_epochs", c.warmup_epochs},
      {"total_epochs", c.total_epochs},
      {"budget_fraction", c.budget_fraction},
      {"val_fraction", c.val_fraction},
      {"weight_steps_per_alloc", c.weight_steps_per_alloc},
      {"mc_samples", c.mc_samples},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"lr", c.lr},
      {"lr_milestones", c.lr_milestones},
      {"lr_decay", c.lr_decay},
      {"momentum", c.momentum},
      {"weight_decay", c.weight_decay},
      {"beta2", {{"initial", c.beta2.initial}, {"multiplier", c.beta2.multiplier}}},
      {"admm",
       {{"rho1", a.rho1},
        {"rho2", a.rho2},
        {"eta_z", a.eta_z},
        {"inner_steps", a.inner_steps},
        {"lv_scale", a.lv_scale},
        {"lr_theta", a.lr_theta},
        {"nonneg_projection", a.nonneg_projection},
        {"budget_scale", a.budget_scale},
        {"square_hinge", a.square_hinge},
        {"initial_keep", a.initial_keep}}},
      {"channel_floor", c.channel_floor},
      {"sensitivity_ratios", c.sensitivity_ratios},
  };
}

struct EpochMetrics {
  int epoch = 0;
  std::string phase;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double flops_ratio = 1.0;
  double inexactness = 0.0;
  std::vector<double> alpha;
  double beta2 = 0.0;
  double lr = 0.0;
  int alloc_iterations = 0;  // cumulative
};

struct FinalResult {
  std::vector<double> alpha;  // keep ratios when the budget was met, before rounding
  std::vector<int> channels;
  std::vector<int> threshold_kept;  // raw finalize_hard counts
  std::vector<int> kept;
  std::int64_t exact_flops = 0;
  std::int64_t full_flops = 0;
  double budget_flops = 0.0;
  double test_loss = 0.0;
  double test_acc = 0.0;
  int finalize_epoch = -1;  // first epoch trained with hard masks; total_epochs if none
  int sharpening_steps = 0;
  double final_beta2 = 0.0;
  double peak_inexactness = 0.0;
  double finalize_inexactness = 0.0;
};

struct RunReport {
  nlohmann::json config;
  std::uint64_t seed = 0;
  nlohmann::json groups;
  nlohmann::json budget;
  std::vector<EpochMetrics> epochs;
  int alloc_iterations = 0;
  int budget_met_epoch = -1;
  int skipped_alpha_updates = 0;
  std::vector<double> first_grad_magnitudes;
  nlohmann::json alloc_state;
  FinalResult final;
  nlohmann::json timings = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json ep = nlohmann::json::array();
    for (const auto& e : epochs) {
      ep.push_back({{"epoch", e.epoch},
                    {"phase", e.phase},
                    {"train_loss", e.train_loss},
                    {"val_loss", e.val_loss},
                    {"val_acc", e.val_acc},
                    {"flops_ratio", e.flops_ratio},
                    {"inexactness", e.inexactness},
                    {"alpha", e.alpha},
                    {"beta2", e.beta2},
                    {"lr", e.lr},
                    {"alloc_iterations", e.alloc_iterations}});
    }
    const auto& f = final;
    std::vector<double> kept_fraction(f.kept.size());
    for (std::size_t k = 0; k < f.kept.size(); ++k) kept_fraction[k] = static_cast<double>(f.kept[k]) / f.channels[k];
    return nlohmann::json{
        {"schema", kReportSchema},
        {"version", DSA_VERSION},
        {"seed", seed},
        {"config", config},
        {"groups", groups},
        {"budget", budget},
        {"epochs", ep},
        {"allocation",
         {{"iterations", alloc_iterations},
          {"budget_met_epoch", budget_met_epoch},
          {"skipped_alpha_updates", skipped_alpha_updates},
          {"first_grad_magnitudes", first_grad_magnitudes},
          {"state", alloc_state}}},
        {"final",
         {{"alpha", f.alpha},
          {"channels", f.channels},
          {"threshold_kept", f.threshold_kept},
          {"kept", f.kept},
          {"kept_fraction", kept_fraction},
          {"exact_flops", f.exact_flops},
          {"full_flops", f.full_flops},
          {"budget_flops", f.budget_flops},
          {"flops_ratio", f.full_flops > 0 ? static_cast<double>(f.exact_flops) / f.full_flops : 0.0},
          {"test_loss", f.test_loss},
          {"test_acc", f.test_acc},
          {"finalize_epoch", f.finalize_epoch},
          {"sharpening_steps", f.sharpening_steps},
          {"final_beta2", f.final_beta2},
          {"peak_inexactness", f.peak_inexactness},
          {"finalize_inexactness", f.finalize_inexactness}}},
        {"timings", timings},
    };
  }
};

template <typename T>
struct RunResult {
  RunReport report;
  nn::ModelState<T> model;         // final weights
  nn::ModelState<T> warmup_model;  // weights when allocation started
  nn::MaskSet masks;               // final hard masks per group
};

// ---------------------------------------------------------------------------
// Helpers

inline std::vector<std::vector<int>> make_batches(std::vector<int> idx, int batch, std::mt19937_64* shuffle,
                                                  bool drop_last) {
  if (shuffle != nullptr) std::shuffle(idx.begin(), idx.end(), *shuffle);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < idx.size(); i += batch) {
    const std::size_t end = std::min(idx.size(), i + static_cast<std::size_t>(batch));
    if (drop_last && end - i < static_cast<std::size_t>(batch)) break;
    out.emplace_back(idx.begin() + i, idx.begin() + end);
  }
  return out;
}

struct EvalResult {
  double loss = 0.0;
  double acc = 0.0;
};

template <typename T>
EvalResult evaluate(const nn::Executor<T>& ex, nn::ModelState<T>& model, const data::Dataset<T>& ds,
                    std::span<const int> idx, const nn::MaskSet& masks, nn::MaskMode mode, int batch) {
  std::vector<int> all(idx.begin(), idx.end());
  if (all.empty()) return {};
  double loss = 0.0;
  long correct = 0;
  for (const auto& b : make_batches(all, batch, nullptr, false)) {
    const auto r = ex.forward(model, data::make_batch(ds, b), masks, mode, nn::Phase::kEval);
    loss += r.loss * b.size();
    correct += r.correct;
  }
  return {loss / all.size(), static_cast<double>(correct) / all.size()};
}

inline std::vector<int> all_indices(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

// Keep ratios below this are treated as this value when solving for beta1.
inline constexpr double kMinAlpha = 1e-9;

/// Re-reads importances and re-solves beta1 for every group.
inline void refresh_groups(std::vector<prune::PruneGroupState>& groups, const std::vector<std::vector<double>>& imp,
                           std::span<const double> alpha, double beta2) {
  for (std::size_t k = 0; k < groups.size(); ++k) {
    groups[k].set_importance(imp[k]);
    groups[k].refresh(std::max(alpha[k], kMinAlpha), beta2);
  }
}

inline double total_inexactness(const std::vector<prune::PruneGroupState>& groups) {
  double e = 0.0;
  for (const auto& g : groups) e += prune::inexactness(g.p);
  return e;
}

inline nn::MaskSet probabilities(const std::vector<prune::PruneGroupState>& groups) {
  nn::MaskSet m;
  for (const auto& g : groups) m.push_back(g.p);
  return m;
}

template <typename Rng>
nn::MaskSet sample_group_masks(const std::vector<prune::PruneGroupState>& groups, Rng& rng) {
  nn::MaskSet m;
  for (const auto& g : groups) m.push_back(prune::sample_masks(g.p, rng));
  return m;
}

/// dL/dalpha per group on one batch: dL/dp is the mask-slot gradient averaged
/// over `samples` Bernoulli draws (or taken once at p when `relaxed`).
/// Saturated groups and groups at alpha = 1 get a zero gradient.
template <typename T, typename Rng>
std::vector<double> alpha_gradient(const nn::Executor<T>& ex, nn::ModelState<T>& model, const nn::Batch<T>& batch,
                                   const std::vector<prune::PruneGroupState>& groups, int samples, Rng& rng,
                                   bool relaxed, int* saturated = nullptr, nn::Phase phase = nn::Phase::kEval) {
  const std::size_t k_groups = groups.size();
  std::vector<std::vector<double>> dl_dp(k_groups);
  for (std::size_t k = 0; k < k_groups; ++k) dl_dp[k].assign(groups[k].b.size(), 0.0);
  const int draws = relaxed ? 1 : samples;
  for (int s = 0; s < draws; ++s) {
    const auto masks = relaxed ? probabilities(groups) : sample_group_masks(groups, rng);
    auto fwd = ex.forward(model, batch, masks, relaxed ? nn::MaskMode::kRelaxed : nn::MaskMode::kSampled, phase);
    const auto grads = ex.backward(fwd.cache);
    for (std::size_t k = 0; k < k_groups; ++k) {
      for (std::size_t c = 0; c < dl_dp[k].size(); ++c) dl_dp[k][c] += grads.dl_dmask[k][c] / draws;
    }
  }
  std::vector<double> out(k_groups, 0.0);
  for (std::size_t k = 0; k < k_groups; ++k) {
    const auto& g = groups[k];
    if (g.alpha >= 1.0) continue;
    try {
      out[k] = prune::dL_dalpha(dl_dp[k], g.b, g.beta1, g.beta2);
    } catch (const SaturationError&) {
      if (saturated != nullptr) ++*saturated;
    }
  }
  return out;
}

/// |dL/dalpha| per group over a whole index set, evaluated deterministically
/// (masks replaced by keep probabilities, running BN statistics) at the given
/// keep ratios.
template <typename T>
std::vector<double> alpha_gradient_magnitudes(const nn::Executor<T>& ex, nn::ModelState<T>& model,
                                              const data::Dataset<T>& ds, std::span<const int> idx,
                                              std::span<const double> alpha, double beta2, int batch) {
  const int k_groups = ex.groups().num_groups;
  std::vector<prune::PruneGroupState> groups(k_groups);
  refresh_groups(groups, ex.group_importance(model), alpha, beta2);
  std::mt19937_64 unused(0);
  std::vector<double> total(k_groups, 0.0);
  std::vector<int> all(idx.begin(), idx.end());
  for (const auto& b : make_batches(all, batch, nullptr, false)) {
    const auto g = alpha_gradient(ex, model, data::make_batch(ds, b), groups, 1, unused, true);
    for (int k = 0; k < k_groups; ++k) total[k] += g[k] * b.size();
  }
  for (auto& v : total) v = std::abs(v / static_cast<double>(all.size()));
  return total;
}

struct HardAllocation {
  std::vector<int> threshold_kept;
  std::vector<int> kept;
  std::int64_t exact_flops = 0;
};

/// Integer channel counts from converged keep ratios. The threshold count of
/// finalize_hard is clamped to [floor(alpha C), ceil(alpha C)] (at least one
/// channel when `channel_floor`); if the exact recount still exceeds the
/// budget, rounded-up groups are rounded down, largest saving first.
inline HardAllocation round_allocation(const NetGraph& graph, const GroupAssignment& groups,
                                       const std::vector<prune::PruneGroupState>& states, std::span<const double> alpha,
                                       double budget_flops, bool channel_floor) {
  HardAllocation h;
  const int k_groups = groups.num_groups;
  std::vector<int> lower(k_groups);
  for (int k = 0; k < k_groups; ++k) {
    const auto& s = states[k];
    const int c = s.channels();
    const auto mask = prune::finalize_hard(s.b, s.beta1);
    const int thr = static_cast<int>(std::count(mask.begin(), mask.end(), 1.0));
    // Tolerate alpha C landing a hair off an integer.
    const double target = alpha[k] * c;
    const int lo = static_cast<int>(std::floor(target + 1e-9));
    const int hi = static_cast<int>(std::ceil(target - 1e-9));
    int kept = alpha[k] >= 1.0 ? c : std::clamp(thr, lo, hi);
    if (kept < 1) {
      if (!channel_floor) throw FlowError("group " + std::to_string(k) + " finalizes to zero channels");
      kept = 1;
    }
    lower[k] = std::max(lo, channel_floor ? 1 : 0);
    h.threshold_kept.push_back(thr);
    h.kept.push_back(kept);
  }
  h.exact_flops = count_pruned_flops(graph, groups, h.kept);
  while (static_cast<double>(h.exact_flops) > budget_flops) {
    int best = -1;
    std::int64_t best_flops = h.exact_flops;
    for (int k = 0; k < k_groups; ++k) {
      if (h.kept[k] <= lower[k]) continue;
      auto trial = h.kept;
      --trial[k];
      const auto f = count_pruned_flops(graph, groups, trial);
      if (f < best_flops) {
        best_flops = f;
        best = k;
      }
    }
    if (best < 0) throw FlowError("hard-pruned network cannot meet the budget after rounding");
    --h.kept[best];
    h.exact_flops = best_flops;
  }
  return h;
}

inline nn::MaskSet hard_masks(const std::vector<prune::PruneGroupState>& states, const std::vector<int>& kept) {
  nn::MaskSet m;
  for (std::size_t k = 0; k < states.size(); ++k) m.push_back(prune::top_k_mask(states[k].b, kept[k]));
  return m;
}

// ---------------------------------------------------------------------------
// Main loop

template <typename T>
RunResult<T> run_dsa(const FlowConfig& cfg, const NetGraph& graph, const data::DataSplits<T>& data) {
  using Clock = std::chrono::steady_clock;
  const auto t_start = Clock::now();
  auto seconds_since = [](Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); };
  cfg.validate();

  const auto groups = topological_group(graph);
  const auto budget = build_flops_model(graph, groups);
  const int k_groups = groups.num_groups;
  const auto channels = groups.channels(graph);
  const double full_flops = budget.full_flops();
  const double budget_flops = cfg.budget_fraction * full_flops;
  {
    std::vector<double> floor_alpha(k_groups);
    for (int k = 0; k < k_groups; ++k) floor_alpha[k] = 1.0 / channels[k];
    if (eval_budget(budget, floor_alpha) > budget_flops) {
      throw BudgetError("budget " + std::to_string(cfg.budget_fraction) +
                        " of full FLOPs is below the one-channel-per-group floor");
    }
  }

  nn::Executor<T> ex(graph, groups);
  if (data.train.num_classes != ex.num_classes()) {
    throw ShapeError("dataset has " + std::to_string(data.train.num_classes) + " classes, graph outputs " +
                     std::to_string(ex.num_classes()));
  }

  std::seed_seq seq{cfg.seed, std::uint64_t{0x64736121}};
  std::uint64_t stream_seeds[3];
  seq.generate(stream_seeds, stream_seeds + 3);
  std::mt19937_64 data_rng(stream_seeds[0]);
  std::mt19937_64 mask_rng(stream_seeds[1]);
  std::mt19937_64 val_rng(stream_seeds[2]);

  RunResult<T> result;
  auto& report = result.report;
  report.config = to_json(cfg);
  report.seed = cfg.seed;
  report.groups = groups.to_json(graph);
  report.budget = budget.to_json();
  report.budget["budget_flops"] = budget_flops;
  report.budget["budget_fraction"] = cfg.budget_fraction;
  report.budget["channels"] = channels;

  auto& model = result.model;
  model = nn::init_model<T>(graph, cfg.seed);
  auto alloc = admm::init_alloc(k_groups, cfg.alloc);
  std::vector<prune::PruneGroupState> states(k_groups);
  std::vector<double> alpha = admm::current_alpha(alloc);
  std::vector<double> converged_alpha;

  const bool trivial_budget = cfg.budget_fraction >= 1.0;
  bool budget_met = false;
  bool finalized = false;
  nn::MaskSet final_masks;
  HardAllocation hard;
  double peak_e = 0.0;
  const int total_channels = std::accumulate(channels.begin(), channels.end(), 0);
  auto finalize_target = [&]() { return std::min(0.01 * total_channels, peak_e / 100.0); };

  const auto all_train = all_indices(data.train.size());
  std::vector<std::vector<int>> val_batches;
  std::size_t val_cursor = 0;
  auto next_val_batch = [&]() {
    if (val_cursor == val_batches.size()) {
      val_batches = make_batches(data.val_idx, cfg.batch_size, &val_rng, false);
      val_cursor = 0;
      if (val_batches.empty()) throw DataError("validation split is empty");
    }
    return data::make_batch(data.train, val_batches[val_cursor++]);
  };

  nn::SgdOptions sgd{cfg.lr, cfg.momentum, cfg.weight_decay, false};
  double t_warmup = 0.0, t_alloc = 0.0, t_post = 0.0;
  long step = 0;

  auto mark_budget_met = [&](int epoch) {
    budget_met = true;
    report.budget_met_epoch = epoch;
  };
  if (trivial_budget) {
    alpha.assign(k_groups, 1.0);
    converged_alpha = alpha;
    mark_budget_met(std::min(cfg.warmup_epochs, cfg.total_epochs - 1));
  }

  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    const double beta2 = cfg.beta2.at(epoch);
    sgd.lr = cfg.lr_at(epoch);
    const bool warmup = epoch < cfg.warmup_epochs;
    if (!warmup && epoch == cfg.warmup_epochs) {
      result.warmup_model = model;
      report.first_grad_magnitudes =
          alpha_gradient_magnitudes(ex, model, data.train, data.val_idx, admm::current_alpha(alloc), beta2,
                                    cfg.batch_size);
    }
    const bool allocating = !warmup && !budget_met;
    std::string phase = warmup ? "warmup" : (finalized ? "finetune" : (allocating ? "allocation" : "post_budget"));

    if (!warmup && !finalized) {
      refresh_groups(states, ex.group_importance(model), alpha, beta2);
      peak_e = std::max(peak_e, total_inexactness(states));
    }

    const auto& pool = allocating ? data.train_idx : all_train;
    double loss_sum = 0.0;
    int loss_count = 0;
    for (const auto& b : make_batches(pool, cfg.batch_size, &data_rng, true)) {
      if (!warmup && !finalized && step % cfg.weight_steps_per_alloc == 0) {
        refresh_groups(states, ex.group_importance(model), alpha, beta2);
        if (!budget_met) {
          const auto vb = next_val_batch();
          int saturated = 0;
          const auto dlda = alpha_gradient(ex, model, vb, states, cfg.mc_samples, mask_rng, false, &saturated,
                                           nn::Phase::kBatchStats);
          report.skipped_alpha_updates += saturated;
          admm::outer_iteration(alloc, dlda, budget, budget_flops);
          alpha = admm::current_alpha(alloc);
          ++report.alloc_iterations;
          if (eval_budget(budget, alpha) <= budget_flops) mark_budget_met(epoch);
          for (int k = 0; k < k_groups; ++k) states[k].refresh(std::max(alpha[k], kMinAlpha), beta2);
          if (budget_met) {
            // Integer kept counts let the inexactness vanish as beta2 grows.
            converged_alpha = alpha;
            const auto h = round_allocation(graph, groups, states, alpha, budget_flops, cfg.channel_floor);
            for (int k = 0; k < k_groups; ++k) alpha[k] = static_cast<double>(h.kept[k]) / channels[k];
            for (int k = 0; k < k_groups; ++k) states[k].refresh(alpha[k], beta2);
          }
        }
        peak_e = std::max(peak_e, total_inexactness(states));
      }
      nn::MaskSet masks;
      nn::MaskMode mode = nn::MaskMode::kSampled;
      if (finalized) {
        masks = final_masks;
        mode = nn::MaskMode::kHard;
      } else if (!warmup) {
        masks = sample_group_masks(states, mask_rng);
      }
      auto fwd = ex.forward(model, data::make_batch(data.train, b), masks, mode, nn::Phase::kTrain);
      loss_sum += fwd.loss;
      ++loss_count;
      const auto grads = ex.backward(fwd.cache);
      nn::sgd_step(model, grads, sgd);
      ++step;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.phase = phase;
    m.train_loss = loss_count ? loss_sum / loss_count : 0.0;
    m.beta2 = beta2;
    m.lr = sgd.lr;
    m.alloc_iterations = report.alloc_iterations;
    m.alpha = alpha;
    m.flops_ratio = eval_budget(budget, alpha) / full_flops;
    EvalResult val;
    if (warmup) {
      val = evaluate(ex, model, data.train, data.val_idx, {}, nn::MaskMode::kSampled, cfg.batch_size);
    } else if (finalized) {
      val = evaluate(ex, model, data.train, data.val_idx, final_masks, nn::MaskMode::kHard, cfg.batch_size);
      m.flops_ratio = static_cast<double>(hard.exact_flops) / full_flops;
    } else {
      refresh_groups(states, ex.group_importance(model), alpha, beta2);
      m.inexactness = total_inexactness(states);
      peak_e = std::max(peak_e, m.inexactness);
      val = evaluate(ex, model, data.train, data.val_idx, probabilities(states), nn::MaskMode::kRelaxed,
                     cfg.batch_size);
    }
    m.val_loss = val.loss;
    m.val_acc = val.acc;
    report.epochs.push_back(m);

    // Once feasible, switch to hard masks as soon as the masks are nearly deterministic.
    if (budget_met && !finalized && !warmup && epoch + 1 < cfg.total_epochs) {
      const double next_beta2 = cfg.beta2.at(epoch + 1);
      refresh_groups(states, ex.group_importance(model), alpha, next_beta2);
      const double e = total_inexactness(states);
      if (e <= finalize_target() || trivial_budget) {
        hard = round_allocation(graph, groups, states, alpha, budget_flops, cfg.channel_floor);
        final_masks = hard_masks(states, hard.kept);
        finalized = true;
        report.final.finalize_epoch = epoch + 1;
        report.final.finalize_inexactness = e;
        report.final.final_beta2 = next_beta2;
      }
    }

    const double dt = seconds_since(t_epoch);
    (warmup ? t_warmup : (phase == "allocation" ? t_alloc : t_post)) += dt;
  }

  if (!budget_met) {
    throw FlowError("budget not reached within " + std::to_string(cfg.total_epochs) +
                    " epochs (F(A)/F(1) = " + std::to_string(eval_budget(budget, alpha) / full_flops) + ")");
  }
  if (result.warmup_model.layers.empty()) result.warmup_model = model;

  // Sharpen past the training schedule until the masks are nearly deterministic.
  if (!finalized) {
    double beta2 = cfg.beta2.at(cfg.total_epochs - 1);
    const auto imp = ex.group_importance(model);
    refresh_groups(states, imp, alpha, beta2);
    int sharpening = 0;
    while (total_inexactness(states) > finalize_target()) {
      if (++sharpening > 2000) throw FlowError("inexactness did not vanish while sharpening");
      beta2 *= cfg.beta2.multiplier > 1.0 ? cfg.beta2.multiplier : 1.1;
      if (!std::isfinite(beta2)) throw FlowError("inexactness did not vanish before beta2 overflowed");
      refresh_groups(states, imp, alpha, beta2);
    }
    report.final.sharpening_steps = sharpening;
    report.final.final_beta2 = beta2;
    report.final.finalize_inexactness = total_inexactness(states);
    report.final.finalize_epoch = cfg.total_epochs;
    hard = round_allocation(graph, groups, states, alpha, budget_flops, cfg.channel_floor);
    final_masks = hard_masks(states, hard.kept);
  }

  auto& f = report.final;
  f.alpha = converged_alpha;
  f.channels = channels;
  f.threshold_kept = hard.threshold_kept;
  f.kept = hard.kept;
  f.exact_flops = hard.exact_flops;
  f.full_flops = count_full_flops(graph, groups);
  f.budget_flops = budget_flops;
  f.peak_inexactness = peak_e;
  const auto test = evaluate(ex, model, data.test, all_indices(data.test.size()), final_masks, nn::MaskMode::kHard,
                             cfg.batch_size);
  f.test_loss = test.loss;
  f.test_acc = test.acc;
  report.alloc_state = admm::to_json(alloc);
  report.timings = {{"warmup_s", t_warmup},
                    {"allocation_s", t_alloc},
                    {"post_budget_s", t_post},
                    {"total_s", seconds_since(t_start)}};
  result.masks = final_masks;
  return result;
}

// ---------------------------------------------------------------------------
// Sensitivity analysis and gradient alignment

struct SensitivityTable {
  std::vector<double> ratios;
  double baseline_acc = 0.0;
  std::vector<std::vector<double>> acc;  // [group][ratio]
  std::vector<double> mean_drop;         // per group, baseline minus mean accuracy

  nlohmann::json to_json() const {
    return nlohmann::json{{"ratios", ratios}, {"baseline_acc", baseline_acc}, {"acc", acc}, {"mean_drop", mean_drop}};
  }
};

/// Prunes each group alone to ceil(ratio C) channels (largest importances
/// kept) and measures test accuracy with every other group intact.
template <typename T>
SensitivityTable sensitivity_analysis(const nn::Executor<T>& ex, nn::ModelState<T>& model, const data::Dataset<T>& test,
                                      std::span<const double> ratios, int batch) {
  SensitivityTable t;
  t.ratios.assign(ratios.begin(), ratios.end());
  const auto idx = all_indices(test.size());
  t.baseline_acc = evaluate(ex, model, test, idx, {}, nn::MaskMode::kHard, batch).acc;
  const auto imp = ex.group_importance(model);
  const int k_groups = ex.groups().num_groups;
  t.acc.assign(k_groups, {});
  t.mean_drop.assign(k_groups, 0.0);
  for (int k = 0; k < k_groups; ++k) {
    const int c = ex.group_channels()[k];
    for (double r : ratios) {
      nn::MaskSet masks(k_groups);
      masks[k] = prune::top_k_mask(imp[k], static_cast<int>(std::ceil(r * c - 1e-9)));
      const double a = evaluate(ex, model, test, idx, masks, nn::MaskMode::kHard, batch).acc;
      t.acc[k].push_back(a);
      t.mean_drop[k] += (t.baseline_acc - a) / ratios.size();
    }
  }
  return t;
}

/// v / std(v) followed by softmax; a constant vector maps to the uniform one.
inline std::vector<double> softmax_std_normalize(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n == 0) return {};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  if (!(sd > 0.0)) return std::vector<double>(n, 1.0 / n);
  std::vector<double> out(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x / sd);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += out[i] = std::exp(v[i] / sd - mx);
  for (auto& x : out) x /= z;
  return out;
}

inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t t = i; t <= j; ++t) rank[idx[t]] = 0.5 * (i + j) + 1.0;
    i = j + 1;
  }
  return rank;
}

/// Spearman rank correlation (Pearson correlation of average ranks).
inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

struct AlignmentData {
  std::vector<double> grad_raw, sens_raw, grad_norm, sens_norm;
  double spearman_rho = 0.0;

  std::string to_csv() const {
    std::ostringstream out;
    out << std::setprecision(17) << "group,grad_magnitude,sensitivity_drop,grad_normalized,sensitivity_normalized\n";
    for (std::size_t k = 0; k < grad_raw.size(); ++k) {
      out << k << ',' << grad_raw[k] << ',' << sens_raw[k] << ',' << grad_norm[k] << ',' << sens_norm[k] << '\n';
    }
    return out.str();
  }
};

inline AlignmentData alignment_data(std::span<const double> grad_mags, std::span<const double> sens_drops) {
  if (grad_mags.size() != sens_drops.size()) throw std::invalid_argument("alignment: vector lengths differ");
  AlignmentData d;
  d.grad_raw.assign(grad_mags.begin(), grad_mags.end());
  d.sens_raw.assign(sens_drops.begin(), sens_drops.end());
  d.grad_norm = softmax_std_normalize(grad_mags);
  d.sens_norm = softmax_std_normalize(sens_drops);
  d.spearman_rho = grad_mags.size() >= 2 ? spearman(d.grad_norm, d.sens_norm) : 1.0;
  return d;
}

inline AlignmentData emit_alignment_data(std::span<const double> grad_mags, std::span<const double> sens_drops,
                                         const std::string& path) {
  auto d = alignment_data(grad_mags, sens_drops);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FlowError("cannot write '" + path + "'");
  out << d.to_csv();
  return d;
}

// ---------------------------------------------------------------------------
// Output files

inline std::string metrics_csv(const RunReport& r) {
  std::ostringstream out;
  out << std::setprecision(10);
  const std::size_t k = r.epochs.empty() ? 0 : r.epochs.front().alpha.size();
  out << "epoch,train_loss,val_loss,val_acc,flops_ratio,inexactness";
  for (std::size_t i = 0; i < k; ++i) out << ",alpha_" << i;
  out << '\n';
  for (const auto& e : r.epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_acc << ',' << e.flops_ratio << ','
        << e.inexactness;
    for (double a : e.alpha) out << ',' << a;
    out << '\n';
  }
  return out.str();
}

}  // namespace dsa::flow
