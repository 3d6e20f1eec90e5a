// SPDX-License-Identifier: Apache-2.0
//
// Probabilistic differentiable channel pruning for one group.
//
// Each channel i with importance b_i is kept with probability
//
//     p_i = f(b_i, beta1, beta2) = 1 / (1 + (b_i / beta1)^(-beta2)),
//
// where beta2 is a sharpness that follows a fixed schedule and beta1 is the
// soft threshold chosen so that the expected number of kept channels equals
// alpha * C. Gradients with respect to alpha flow through beta1 implicitly.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dsa/error.hpp"

namespace dsa::prune {

inline double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double keep_prob(double b, double beta1, double beta2) {
  if (!(b > 0) || !(beta1 > 0) || !(beta2 > 0)) {
    throw std::invalid_argument("keep_prob: importance, beta1 and beta2 must be positive");
  }
  return stable_sigmoid(beta2 * (std::log(b) - std::log(beta1)));
}

/// df/dbeta1 = -(beta2 / beta1) * f * (1 - f); never positive.
inline double keep_prob_dbeta1(double b, double beta1, double beta2) {
  const double p = keep_prob(b, beta1, beta2);
  return -(beta2 / beta1) * p * (1.0 - p);
}

/// Mean keep probability minus alpha, as a function of log(beta1).
inline double expectation_gap(std::span<const double> b, double log_beta1, double alpha, double beta2) {
  double sum = 0.0;
  for (double bi : b) sum += stable_sigmoid(beta2 * (std::log(bi) - log_beta1));
  return sum / static_cast<double>(b.size()) - alpha;
}

struct SolverOptions {
  double tolerance = 1e-12;
  int max_expansions = 200;
  int max_iterations = 400;
};

/// Solves mean_i f(b_i, beta1, beta2) = alpha for beta1 by bisection in
/// log(beta1). The gap is strictly decreasing, so a bracket that straddles
/// the root is enough; it starts at [min(b) * 1e-6, max(b) * 1e6] and its
/// offending end is pushed out by doubling the span as needed.
inline double solve_beta1(std::span<const double> b, double alpha, double beta2,
                          const SolverOptions& opt = {}) {
  if (b.empty()) throw std::invalid_argument("solve_beta1: empty importance vector");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("solve_beta1: alpha must lie in (0, 1)");
  if (!(beta2 > 0)) throw std::invalid_argument("solve_beta1: beta2 must be positive");
  for (double bi : b) {
    if (!(bi > 0) || !std::isfinite(bi)) throw std::invalid_argument("solve_beta1: importances must be positive");
  }
  const auto [min_it, max_it] = std::minmax_element(b.begin(), b.end());
  double lo = std::log(*min_it) - std::log(1e6);
  double hi = std::log(*max_it) + std::log(1e6);

  double g_lo = expectation_gap(b, lo, alpha, beta2);
  for (int i = 0; g_lo < 0; ++i) {
    if (i == opt.max_expansions) throw SolverError("solve_beta1: could not bracket the root from below");
    lo -= (hi - lo);
    g_lo = expectation_gap(b, lo, alpha, beta2);
  }
  double g_hi = expectation_gap(b, hi, alpha, beta2);
  for (int i = 0; g_hi > 0; ++i) {
    if (i == opt.max_expansions) throw SolverError("solve_beta1: could not bracket the root from above");
    hi += (hi - lo);
    g_hi = expectation_gap(b, hi, alpha, beta2);
  }

  double best = std::abs(g_lo) < std::abs(g_hi) ? lo : hi;
  double best_gap = std::min(std::abs(g_lo), std::abs(g_hi));
  for (int it = 0; it < opt.max_iterations && best_gap > opt.tolerance; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const double g = expectation_gap(b, mid, alpha, beta2);
    if (std::abs(g) < best_gap) {
      best_gap = std::abs(g);
      best = mid;
    }
    if (g > 0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::exp(best);
}

inline std::vector<double> keep_probs(std::span<const double> b, double beta1, double beta2) {
  std::vector<double> p(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) p[i] = keep_prob(b[i], beta1, beta2);
  return p;
}

/// Independent Bernoulli draws m_i ~ Bernoulli(p_i).
template <typename Rng>
std::vector<double> sample_masks(std::span<const double> p, Rng& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0 && p[i] <= 1.0)) throw std::invalid_argument("sample_masks: probability outside [0, 1]");
    m[i] = uniform(rng) < p[i] ? 1.0 : 0.0;
  }
  return m;
}

/// Variance of the kept-channel count, sum_i p_i (1 - p_i).
inline double inexactness(std::span<const double> p) {
  double e = 0.0;
  for (double pi : p) e += pi * (1.0 - pi);
  return e;
}

namespace detail {

inline double sum_dbeta1(std::span<const double> b, double beta1, double beta2) {
  double sum = 0.0;
  bool saturated = true;
  for (double bi : b) {
    const double p = keep_prob(bi, beta1, beta2);
    if (p > 1e-12 && p < 1.0 - 1e-12) saturated = false;
    sum += -(beta2 / beta1) * p * (1.0 - p);
  }
  if (saturated || sum == 0.0) throw SaturationError("all keep probabilities are saturated");
  return sum;
}

}  // namespace detail

/// Implicit gradient dbeta1/dalpha = C / sum_i df/dbeta1(b_i). Negative.
inline double dbeta1_dalpha(std::span<const double> b, double beta1, double beta2) {
  return static_cast<double>(b.size()) / detail::sum_dbeta1(b, beta1, beta2);
}

/// dL/dalpha = C * sum_i dL/dp_i * w_i with w_i = f'_i / sum_j f'_j. The
/// weights are nonnegative and sum to one.
inline double dL_dalpha(std::span<const double> dl_dp, std::span<const double> b, double beta1, double beta2) {
  if (dl_dp.size() != b.size()) throw std::invalid_argument("dL_dalpha: gradient and importance sizes differ");
  const double denom = detail::sum_dbeta1(b, beta1, beta2);
  double acc = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    acc += dl_dp[i] * (keep_prob_dbeta1(b[i], beta1, beta2) / denom);
  }
  return static_cast<double>(b.size()) * acc;
}

/// Hard mask with beta1 as the threshold; ties keep the channel.
inline std::vector<double> finalize_hard(std::span<const double> b, double beta1) {
  if (!(beta1 > 0)) throw std::invalid_argument("finalize_hard: beta1 must be positive");
  std::vector<double> m(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) m[i] = b[i] >= beta1 ? 1.0 : 0.0;
  return m;
}

/// Mask keeping the `keep` most important channels (ties resolved by index).
inline std::vector<double> top_k_mask(std::span<const double> b, int keep) {
  std::vector<std::size_t> idx(b.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return b[x] > b[y]; });
  std::vector<double> m(b.size(), 0.0);
  const auto n = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(keep, 0)), 0, b.size());
  for (std::size_t i = 0; i < n; ++i) m[idx[i]] = 1.0;
  return m;
}

struct Beta2Schedule {
  double initial = 0.05;
  double multiplier = 1.1;  // per epoch

  double at(int epoch) const {
    if (epoch < 0) throw std::invalid_argument("Beta2Schedule: negative epoch");
    return initial * std::pow(multiplier, epoch);
  }
};

inline double beta2_at(const Beta2Schedule& schedule, int epoch) { return schedule.at(epoch); }

/// Per-group pruning state. `refresh` re-solves beta1 for the current
/// alpha/beta2/importances and recomputes the keep probabilities.
struct PruneGroupState {
  double alpha = 1.0;
  double beta1 = 1.0;
  double beta2 = 0.05;
  std::vector<double> b;
  std::vector<double> p;
  std::vector<double> m;

  static constexpr double kImportanceFloor = 1e-12;

  void set_importance(std::span<const double> raw) {
    b.assign(raw.begin(), raw.end());
    for (double& bi : b) bi = std::max(std::abs(bi), kImportanceFloor);
  }

  void refresh(double new_alpha, double new_beta2) {
    alpha = new_alpha;
    beta2 = new_beta2;
    if (alpha >= 1.0) {
      // Everything kept; pick a threshold below every importance.
      beta1 = *std::min_element(b.begin(), b.end()) * 1e-6;
      p.assign(b.size(), 1.0);
      return;
    }
    beta1 = solve_beta1(b, alpha, beta2);
    p = keep_probs(b, beta1, beta2);
  }

  double expected_kept() const { return std::accumulate(p.begin(), p.end(), 0.0); }
  int channels() const { return static_cast<int>(b.size()); }
};

}  // namespace dsa::prune
