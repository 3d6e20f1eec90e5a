// SPDX-License-Identifier: Apache-2.0
//
// ADMM-style allocator for per-group keep ratios under a budget.
//
// Keep ratios are parametrized as A = sigmoid(theta). One outer iteration
// performs a stochastic gradient step on theta against the validation loss
// plus the coupling terms u2^T (theta - z) + rho2/2 ||theta - z||^2, an inner
// min-max on the auxiliary z against the hinged budget violation with its own
// dual u1, and dual ascent on u2.

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsa/budget.hpp"
#include "dsa/error.hpp"

namespace dsa::admm {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double sigmoid_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s);
}

inline double logit(double a) { return std::log(a) - std::log1p(-a); }

struct AllocOptions {
  double rho1 = 0.01;
  double rho2 = 0.01;
  double eta_z = 1e-3;
  int inner_steps = 50;
  double lv_scale = 1e5;
  double lr_theta = 1e-2;
  bool nonneg_projection = true;
  // The budget is measured as budget_scale * F(A) / F(1) inside the
  // allocator so that the penalty constants do not depend on network size.
  double budget_scale = 1e3;
  // Penalize [F - B]_+^2 (true) or (F - B)^2 (false) in the z subproblem.
  bool square_hinge = true;
  double divergence_limit = 1e6;
  double initial_keep = 1.0 - 1e-4;
};

struct AllocState {
  std::vector<double> theta;
  std::vector<double> z;
  double u1 = 0.0;
  std::vector<double> u2;
  AllocOptions opt;
  int iteration = 0;
  int skipped_steps = 0;

  int num_groups() const { return static_cast<int>(theta.size()); }
};

inline AllocState init_alloc(int num_groups, const AllocOptions& opt = {}) {
  AllocState s;
  s.opt = opt;
  s.theta.assign(num_groups, logit(opt.initial_keep));
  s.z = s.theta;
  s.u2.assign(num_groups, 0.0);
  return s;
}

inline std::vector<double> current_alpha(const AllocState& s) {
  std::vector<double> a(s.theta.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = sigmoid(s.theta[i]);
  return a;
}

/// One projected gradient step on theta. Returns false (and leaves theta
/// untouched) when the gradient is not finite.
inline bool theta_step(AllocState& s, std::span<const double> dlv_da, double lr_theta) {
  const std::size_t k = s.theta.size();
  if (dlv_da.size() != k) throw std::invalid_argument("theta_step: gradient has wrong length");
  std::vector<double> g(k);
  for (std::size_t i = 0; i < k; ++i) {
    g[i] = s.opt.lv_scale * dlv_da[i] * sigmoid_grad(s.theta[i]) + s.u2[i] + s.opt.rho2 * (s.theta[i] - s.z[i]);
    if (!std::isfinite(g[i])) {
      ++s.skipped_steps;
      return false;
    }
    if (s.opt.nonneg_projection) g[i] = std::max(g[i], 0.0);
  }
  for (std::size_t i = 0; i < k; ++i) s.theta[i] -= lr_theta * g[i];
  return true;
}

inline bool theta_step(AllocState& s, std::span<const double> dlv_da) {
  return theta_step(s, dlv_da, s.opt.lr_theta);
}

/// Relative budget usage F(A) / F(1).
inline double budget_ratio(const BudgetModel& model, std::span<const double> alpha) {
  return eval_budget(model, alpha) / model.full_flops();
}

/// Inner min-max on z and u1: inner_steps iterations of one gradient step on
/// z followed by one dual ascent step on u1.
inline void z_step(AllocState& s, const BudgetModel& model, double budget_flops) {
  const std::size_t k = s.z.size();
  if (static_cast<int>(k) != model.num_groups) throw BudgetError("z_step: budget model has wrong group count");
  const double full = model.full_flops();
  if (!(full > 0)) throw BudgetError("z_step: budget model has zero full FLOPs");
  const double scale = s.opt.budget_scale / full;
  const double target = budget_flops * scale;
  std::vector<double> a(k);
  auto excess = [&]() {
    for (std::size_t i = 0; i < k; ++i) a[i] = sigmoid(s.z[i]);
    return eval_budget(model, a) * scale - target;
  };
  for (int step = 0; step < s.opt.inner_steps; ++step) {
    const double diff = excess();
    const double hinge = std::max(diff, 0.0);
    const double coeff = (hinge > 0 ? s.u1 : 0.0) + s.opt.rho1 * (s.opt.square_hinge ? hinge : diff);
    const auto grad_f = eval_budget_grad(model, a);
    for (std::size_t i = 0; i < k; ++i) {
      const double g = coeff * grad_f[i] * scale * a[i] * (1.0 - a[i]) - s.u2[i] - s.opt.rho2 * (s.theta[i] - s.z[i]);
      s.z[i] -= s.opt.eta_z * g;
      if (!std::isfinite(s.z[i]) || std::abs(s.z[i]) > s.opt.divergence_limit) {
        throw SolverError("z_step diverged: z[" + std::to_string(i) + "] = " + std::to_string(s.z[i]) +
                          ", u1 = " + std::to_string(s.u1) + ", step " + std::to_string(step));
      }
    }
    s.u1 = std::max(0.0, s.u1 + s.opt.rho1 * std::max(excess(), 0.0));
  }
}

inline void dual_step(AllocState& s) {
  for (std::size_t i = 0; i < s.u2.size(); ++i) s.u2[i] += s.opt.rho2 * (s.theta[i] - s.z[i]);
}

/// theta step, z step, dual step.
inline void outer_iteration(AllocState& s, std::span<const double> dlv_da, const BudgetModel& model,
                            double budget_flops) {
  theta_step(s, dlv_da);
  z_step(s, model, budget_flops);
  dual_step(s);
  ++s.iteration;
}

inline nlohmann::json to_json(const AllocState& s) {
  const auto& o = s.opt;
  return nlohmann::json{
      {"theta", s.theta},
      {"z", s.z},
      {"u1", s.u1},
      {"u2", s.u2},
      {"iteration", s.iteration},
      {"skipped_steps", s.skipped_steps},
      {"options",
       {{"rho1", o.rho1}, {"rho2", o.rho2}, {"eta_z", o.eta_z}, {"inner_steps", o.inner_steps},
        {"lv_scale", o.lv_scale}, {"lr_theta", o.lr_theta}, {"nonneg_projection", o.nonneg_projection},
        {"budget_scale", o.budget_scale}, {"square_hinge", o.square_hinge}}}};
}

inline AllocState from_json(const nlohmann::json& j) {
  AllocState s;
  s.theta = j.at("theta").get<std::vector<double>>();
  s.z = j.at("z").get<std::vector<double>>();
  s.u1 = j.at("u1").get<double>();
  s.u2 = j.at("u2").get<std::vector<double>>();
  s.iteration = j.value("iteration", 0);
  s.skipped_steps = j.value("skipped_steps", 0);
  if (j.contains("options")) {
    const auto& o = j["options"];
    s.opt.rho1 = o.value("rho1", s.opt.rho1);
    s.opt.rho2 = o.value("rho2", s.opt.rho2);
    s.opt.eta_z = o.value("eta_z", s.opt.eta_z);
    s.opt.inner_steps = o.value("inner_steps", s.opt.inner_steps);
    s.opt.lv_scale = o.value("lv_scale", s.opt.lv_scale);
    s.opt.lr_theta = o.value("lr_theta", s.opt.lr_theta);
    s.opt.nonneg_projection = o.value("nonneg_projection", s.opt.nonneg_projection);
    s.opt.budget_scale = o.value("budget_scale", s.opt.budget_scale);
    s.opt.square_hinge = o.value("square_hinge", s.opt.square_hinge);
  }
  if (s.z.size() != s.theta.size() || s.u2.size() != s.theta.size()) {
    throw std::invalid_argument("allocator state: theta, z and u2 lengths differ");
  }
  return s;
}

}  // namespace dsa::admm
