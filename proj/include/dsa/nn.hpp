// SPDX-License-Identifier: Apache-2.0
//
// Minimal CPU training engine that executes a NetGraph.
//
// Convolution nodes run as a fused Conv -> BN -> ReLU block whose output
// channels are multiplied by the mask vector of the node's topological group.
// The backward pass returns exact parameter gradients of the masked loss and,
// per group, the gradient of the loss with respect to each mask slot.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dsa/error.hpp"
#include "dsa/graph.hpp"
#include "dsa/grouping.hpp"
#include "dsa/tensor.hpp"

namespace dsa::nn {

enum Slot : int { kWeight = 0, kBias = 1, kGamma = 2, kBeta = 3 };
inline constexpr int kNumSlots = 4;
inline const char* slot_name(int s) {
  static const char* kNames[] = {"weight", "bias", "gamma", "beta"};
  return kNames[s];
}

template <typename T>
struct LayerState {
  std::array<Tensor<T>, kNumSlots> param;
  std::array<Tensor<T>, kNumSlots> velocity;
  Tensor<T> running_mean;
  Tensor<T> running_var;

  bool has_bn() const { return !param[kGamma].empty(); }
};

/// Trainable parameters, BN running statistics and momentum buffers, one
/// LayerState per graph node (empty for parameter-free nodes).
template <typename T>
struct ModelState {
  std::vector<LayerState<T>> layers;

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (int s = 0; s < kNumSlots; ++s) {
        if (!layers[i].param[s].empty()) fn(i, s, layers[i].param[s]);
      }
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) {
      for (const auto& p : l.param) n += p.size();
    }
    return n;
  }
};

struct InitOptions {
  bool zero_classifier = false;  // zero weights and bias of DENSE nodes
};

template <typename T>
ModelState<T> init_model(const NetGraph& graph, std::uint64_t seed, const InitOptions& opt = {}) {
  std::mt19937_64 rng(seed);
  ModelState<T> model;
  model.layers.resize(graph.size());
  auto add_bn = [](LayerState<T>& l, int c) {
    l.param[kGamma] = Tensor<T>({c}, T(1));
    l.param[kBeta] = Tensor<T>({c}, T(0));
    l.running_mean = Tensor<T>({c}, T(0));
    l.running_var = Tensor<T>({c}, T(1));
  };
  for (std::size_t i : graph.topological_order()) {
    const Node& n = graph.node(i);
    auto& l = model.layers[i];
    const int cin = n.inputs.empty() ? 0 : graph.node(n.inputs[0]).channels;
    switch (n.kind) {
      case NodeKind::kNormalConv:
      case NodeKind::kDepthwiseConv: {
        const bool dw = n.kind == NodeKind::kDepthwiseConv;
        const int fan_in = (dw ? 1 : cin) * n.kernel * n.kernel;
        l.param[kWeight] = Tensor<T>({n.channels, dw ? 1 : cin, n.kernel, n.kernel});
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (auto& w : l.param[kWeight].data) w = static_cast<T>(dist(rng));
        if (n.bn) {
          add_bn(l, n.channels);
        } else {
          l.param[kBias] = Tensor<T>({n.channels}, T(0));
        }
        break;
      }
      case NodeKind::kDense: {
        l.param[kWeight] = Tensor<T>({n.channels, cin});
        l.param[kBias] = Tensor<T>({n.channels}, T(0));
        if (!opt.zero_classifier) {
          const double bound = 1.0 / std::sqrt(static_cast<double>(cin));
          std::uniform_real_distribution<double> dist(-bound, bound);
          for (auto& w : l.param[kWeight].data) w = static_cast<T>(dist(rng));
        }
        break;
      }
      case NodeKind::kBatchNorm:
        add_bn(l, n.channels);
        break;
      default:
        break;
    }
  }
  for (auto& l : model.layers) {
    for (int s = 0; s < kNumSlots; ++s) {
      if (!l.param[s].empty()) l.velocity[s] = Tensor<T>(l.param[s].shape, T(0));
    }
  }
  return model;
}

template <typename T>
struct Batch {
  Tensor<T> inputs;  // N x C x H x W
  std::vector<int> labels;

  int size() const { return inputs.empty() ? 0 : inputs.dim(0); }
};

// kBatchStats normalizes with batch statistics like kTrain but leaves the
// running statistics untouched.
enum class Phase { kTrain, kEval, kBatchStats };

/// How the mask vectors handed to forward() were produced. Sampled and hard
/// masks must be binary; relaxed masks carry keep probabilities.
enum class MaskMode { kSampled, kRelaxed, kHard };

using MaskSet = std::vector<std::vector<double>>;  // per group; empty means all ones

template <typename T>
struct ForwardCache {
  const ModelState<T>* model = nullptr;
  Phase phase = Phase::kTrain;
  std::vector<Tensor<T>> out;       // per node, after masking
  std::vector<Tensor<T>> act;       // fused conv: activation before the mask
  std::vector<Tensor<T>> xhat;      // BN normalized input
  std::vector<std::vector<T>> inv_std;
  std::vector<std::vector<int>> argmax;  // max pool
  std::vector<std::vector<T>> masks;     // per group, as applied
  Tensor<T> probs;                       // softmax of the logits
  std::vector<int> labels;
  bool consumed = false;
};

template <typename T>
struct ForwardResult {
  double loss = 0.0;
  int correct = 0;
  ForwardCache<T> cache;
};

template <typename T>
struct Gradients {
  std::vector<std::array<Tensor<T>, kNumSlots>> param;  // per node
  std::vector<std::vector<double>> dl_dmask;             // per group, per channel
};

struct SgdOptions {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  bool decay_bn = false;
};

/// Momentum SGD: v <- momentum * v + (g + wd * w); w <- w - lr * v.
template <typename T>
void sgd_step(ModelState<T>& model, const Gradients<T>& grads, const SgdOptions& opt) {
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& l = model.layers[i];
    for (int s = 0; s < kNumSlots; ++s) {
      auto& w = l.param[s];
      if (w.empty()) continue;
      const auto& g = grads.param.at(i)[s];
      if (g.size() != w.size()) throw ShapeError("sgd_step: gradient shape mismatch");
      const bool bn_param = s == kGamma || s == kBeta;
      const double wd = (bn_param && !opt.decay_bn) ? 0.0 : opt.weight_decay;
      auto& v = l.velocity[s];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double step = static_cast<double>(g[j]) + wd * static_cast<double>(w[j]);
        v[j] = static_cast<T>(opt.momentum * static_cast<double>(v[j]) + step);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - opt.lr * static_cast<double>(v[j]));
      }
    }
  }
}

namespace detail {

template <typename T>
void im2col(const T* x, int cin, int h, int w, int k, int stride, int pad, int ho, int wo, T* col) {
  const int hw = ho * wo;
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * wo, row + (oy + 1) * wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, int cin, int h, int w, int k, int stride, int pad, int ho, int wo, T* x) {
  const int hw = ho * wo;
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = x + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Executes a graph's forward and backward passes for a fixed grouping.
template <typename T>
class Executor {
 public:
  Executor(const NetGraph& graph, GroupAssignment groups)
      : graph_(&graph), groups_(std::move(groups)), sink_(graph.sink()) {
    group_channels_ = groups_.channels(graph);
    const Node& s = graph.node(sink_);
    if (s.height != 1 || s.width != 1) throw ShapeError("output node '" + s.id + "' must be spatially 1x1");
    num_classes_ = s.channels;
  }

  const NetGraph& graph() const { return *graph_; }
  const GroupAssignment& groups() const { return groups_; }
  const std::vector<int>& group_channels() const { return group_channels_; }
  int num_classes() const { return num_classes_; }

  ForwardResult<T> forward(ModelState<T>& model, const Batch<T>& batch, const MaskSet& masks, MaskMode mode,
                           Phase phase) const {
    const NetGraph& g = *graph_;
    const int n_batch = batch.size();
    if (n_batch == 0) throw ShapeError("forward: empty batch");
    if (static_cast<int>(batch.labels.size()) != n_batch) throw ShapeError("forward: label count mismatch");
    if (model.layers.size() != g.size()) throw ShapeError("forward: model does not match graph");

    ForwardResult<T> result;
    auto& cache = result.cache;
    cache.model = &model;
    cache.phase = phase;
    cache.out.resize(g.size());
    cache.act.resize(g.size());
    cache.xhat.resize(g.size());
    cache.inv_std.resize(g.size());
    cache.argmax.resize(g.size());
    cache.labels = batch.labels;
    cache.masks = expand_masks(masks, mode);

    for (std::size_t i : g.topological_order()) {
      const Node& n = g.node(i);
      Tensor<T>& y = cache.out[i];
      switch (n.kind) {
        case NodeKind::kInput: {
          const auto& x = batch.inputs;
          if (x.shape.size() != 4 || x.dim(1) != n.channels || x.dim(2) != n.height || x.dim(3) != n.width) {
            throw ShapeError("input batch " + x.shape_string() + " does not match INPUT '" + n.id + "'");
          }
          y = x;
          break;
        }
        case NodeKind::kNormalConv:
        case NodeKind::kDepthwiseConv:
          forward_conv(model, i, cache, n_batch);
          break;
        case NodeKind::kBatchNorm: {
          y = cache.out[n.inputs[0]];
          batch_norm_forward(model.layers[i], y, phase, cache.xhat[i], cache.inv_std[i]);
          break;
        }
        case NodeKind::kRelu:
          y = cache.out[n.inputs[0]];
          for (auto& v : y.data) v = std::max(v, T(0));
          break;
        case NodeKind::kAdd:
          y = cache.out[n.inputs[0]];
          for (std::size_t k = 1; k < n.inputs.size(); ++k) {
            const auto& o = cache.out[n.inputs[k]];
            for (std::size_t j = 0; j < y.size(); ++j) y[j] += o[j];
          }
          break;
        case NodeKind::kConcat:
          forward_concat(i, cache, n_batch);
          break;
        case NodeKind::kPool:
          forward_pool(i, cache, n_batch);
          break;
        case NodeKind::kDense:
          forward_dense(model.layers[i], i, cache, n_batch);
          break;
      }
    }

    // Softmax cross-entropy, averaged over the batch.
    const Tensor<T>& logits = cache.out[sink_];
    cache.probs = Tensor<T>({n_batch, num_classes_});
    double loss = 0.0;
    for (int b = 0; b < n_batch; ++b) {
      const int label = batch.labels[b];
      if (label < 0 || label >= num_classes_) throw ShapeError("label out of range");
      const T* z = logits.ptr() + static_cast<std::size_t>(b) * num_classes_;
      T* pr = cache.probs.ptr() + static_cast<std::size_t>(b) * num_classes_;
      const T zmax = *std::max_element(z, z + num_classes_);
      double denom = 0.0;
      for (int c = 0; c < num_classes_; ++c) denom += std::exp(static_cast<double>(z[c] - zmax));
      int best = 0;
      for (int c = 0; c < num_classes_; ++c) {
        pr[c] = static_cast<T>(std::exp(static_cast<double>(z[c] - zmax)) / denom);
        if (z[c] > z[best]) best = c;
      }
      loss += std::log(denom) - static_cast<double>(z[label] - zmax);
      if (best == label) ++result.correct;
    }
    result.loss = loss / n_batch;
    if (!std::isfinite(result.loss)) throw NumericError("forward: non-finite loss");
    return result;
  }

  Gradients<T> backward(ForwardCache<T>& cache) const {
    if (cache.consumed) throw std::logic_error("backward: forward cache already consumed");
    if (cache.model == nullptr) throw std::logic_error("backward: empty forward cache");
    cache.consumed = true;
    const NetGraph& g = *graph_;
    const ModelState<T>& model = *cache.model;
    const int n_batch = static_cast<int>(cache.labels.size());

    Gradients<T> grads;
    grads.param.resize(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (int s = 0; s < kNumSlots; ++s) {
        const auto& p = model.layers[i].param[s];
        if (!p.empty()) grads.param[i][s] = Tensor<T>(p.shape, T(0));
      }
    }
    grads.dl_dmask.resize(groups_.num_groups);
    for (int k = 0; k < groups_.num_groups; ++k) grads.dl_dmask[k].assign(group_channels_[k], 0.0);

    std::vector<Tensor<T>> dout(g.size());
    {
      Tensor<T> d = cache.probs;
      for (int b = 0; b < n_batch; ++b) d[static_cast<std::size_t>(b) * num_classes_ + cache.labels[b]] -= T(1);
      for (auto& v : d.data) v /= static_cast<T>(n_batch);
      d.shape = cache.out[sink_].shape;
      dout[sink_] = std::move(d);
    }
    auto accumulate = [&](std::size_t node, const Tensor<T>& d) {
      if (dout[node].empty()) {
        dout[node] = d;
      } else {
        for (std::size_t j = 0; j < d.size(); ++j) dout[node][j] += d[j];
      }
    };

    const auto& order = g.topological_order();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const std::size_t i = *it;
      if (dout[i].empty()) continue;
      const Node& n = g.node(i);
      Tensor<T>& dy = dout[i];
      switch (n.kind) {
        case NodeKind::kInput:
          break;
        case NodeKind::kNormalConv:
        case NodeKind::kDepthwiseConv: {
          Tensor<T> dx = backward_conv(model, i, cache, dy, grads, n_batch);
          accumulate(n.inputs[0], dx);
          break;
        }
        case NodeKind::kBatchNorm: {
          batch_norm_backward(model.layers[i], dy, cache.xhat[i], cache.inv_std[i], cache.phase, grads.param[i]);
          accumulate(n.inputs[0], dy);
          break;
        }
        case NodeKind::kRelu: {
          const auto& y = cache.out[i];
          for (std::size_t j = 0; j < dy.size(); ++j) {
            if (!(y[j] > T(0))) dy[j] = T(0);
          }
          accumulate(n.inputs[0], dy);
          break;
        }
        case NodeKind::kAdd:
          for (std::size_t p : n.inputs) accumulate(p, dy);
          break;
        case NodeKind::kConcat:
          backward_concat(i, cache, dy, n_batch, accumulate);
          break;
        case NodeKind::kPool:
          accumulate(n.inputs[0], backward_pool(i, cache, dy, n_batch));
          break;
        case NodeKind::kDense:
          accumulate(n.inputs[0], backward_dense(model.layers[i], i, cache, dy, grads.param[i], n_batch));
          break;
      }
      dy = Tensor<T>();
    }
    return grads;
  }

  /// Base channel importances per group: the L1 norm of the BN scales of the
  /// group's convolutions, or of the filters when a group has no BN.
  std::vector<std::vector<double>> group_importance(const ModelState<T>& model) const {
    std::vector<std::vector<double>> imp(groups_.num_groups);
    std::vector<bool> from_bn(groups_.num_groups, false);
    for (int k = 0; k < groups_.num_groups; ++k) imp[k].assign(group_channels_[k], 0.0);
    const auto members = groups_.members();
    for (int k = 0; k < groups_.num_groups; ++k) {
      for (std::size_t i : members[k]) from_bn[k] = from_bn[k] || model.layers[i].has_bn();
      for (std::size_t i : members[k]) {
        const auto& l = model.layers[i];
        if (from_bn[k]) {
          if (!l.has_bn()) continue;
          for (int c = 0; c < group_channels_[k]; ++c) imp[k][c] += std::abs(static_cast<double>(l.param[kGamma][c]));
        } else {
          const auto& w = l.param[kWeight];
          const std::size_t per = w.size() / group_channels_[k];
          for (int c = 0; c < group_channels_[k]; ++c) {
            for (std::size_t j = 0; j < per; ++j) imp[k][c] += std::abs(static_cast<double>(w[c * per + j]));
          }
        }
      }
    }
    return imp;
  }

 private:
  std::vector<std::vector<T>> expand_masks(const MaskSet& masks, MaskMode mode) const {
    std::vector<std::vector<T>> out(groups_.num_groups);
    if (!masks.empty() && masks.size() != static_cast<std::size_t>(groups_.num_groups)) {
      throw ShapeError("forward: expected " + std::to_string(groups_.num_groups) + " mask vectors");
    }
    for (int k = 0; k < groups_.num_groups; ++k) {
      if (masks.empty() || masks[k].empty()) {
        out[k].assign(group_channels_[k], T(1));
        continue;
      }
      if (masks[k].size() != static_cast<std::size_t>(group_channels_[k])) {
        throw ShapeError("forward: mask of group " + std::to_string(k) + " has wrong length");
      }
      out[k].resize(group_channels_[k]);
      for (int c = 0; c < group_channels_[k]; ++c) {
        const double v = masks[k][c];
        if (mode != MaskMode::kRelaxed && v != 0.0 && v != 1.0) {
          throw ShapeError("forward: sampled/hard masks must be binary");
        }
        out[k][c] = static_cast<T>(v);
      }
    }
    return out;
  }

  static constexpr double kBnEps = 1e-5;
  static constexpr double kBnMomentum = 0.1;

  // Normalizes y in place (N x C x HW), leaving gamma * xhat + beta.
  // In the training phase the running statistics are updated from the batch.
  static void batch_norm_forward(LayerState<T>& l, Tensor<T>& y, Phase phase, Tensor<T>& xhat,
                                 std::vector<T>& inv_std) {
    const int n_batch = y.dim(0), c = y.dim(1);
    const int hw = y.dim(2) * y.dim(3);
    const double count = static_cast<double>(n_batch) * hw;
    xhat = Tensor<T>(y.shape);
    inv_std.assign(c, T(0));
    for (int ch = 0; ch < c; ++ch) {
      double mean = 0.0, var = 0.0;
      if (phase != Phase::kEval) {
        for (int b = 0; b < n_batch; ++b) {
          const T* p = y.ptr() + (static_cast<std::size_t>(b) * c + ch) * hw;
          for (int j = 0; j < hw; ++j) mean += p[j];
        }
        mean /= count;
        for (int b = 0; b < n_batch; ++b) {
          const T* p = y.ptr() + (static_cast<std::size_t>(b) * c + ch) * hw;
          for (int j = 0; j < hw; ++j) var += (p[j] - mean) * (p[j] - mean);
        }
        const double unbiased = count > 1 ? var / (count - 1) : var / count;
        var /= count;
        if (phase == Phase::kTrain) {
          l.running_mean[ch] = static_cast<T>((1 - kBnMomentum) * l.running_mean[ch] + kBnMomentum * mean);
          l.running_var[ch] = static_cast<T>((1 - kBnMomentum) * l.running_var[ch] + kBnMomentum * unbiased);
        }
      } else {
        mean = l.running_mean[ch];
        var = l.running_var[ch];
      }
      const double is = 1.0 / std::sqrt(var + kBnEps);
      inv_std[ch] = static_cast<T>(is);
      const double gamma = l.param[kGamma][ch], beta = l.param[kBeta][ch];
      for (int b = 0; b < n_batch; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        T* p = y.ptr() + off;
        T* xh = xhat.ptr() + off;
        for (int j = 0; j < hw; ++j) {
          const T v = static_cast<T>((p[j] - mean) * is);
          xh[j] = v;
          p[j] = static_cast<T>(gamma * v + beta);
        }
      }
    }
  }

  // dy (N x C x HW) is replaced by the gradient w.r.t. the BN input.
  static void batch_norm_backward(const LayerState<T>& l, Tensor<T>& dy, const Tensor<T>& xhat,
                                  const std::vector<T>& inv_std, Phase phase,
                                  std::array<Tensor<T>, kNumSlots>& g) {
    const int n_batch = dy.dim(0), c = dy.dim(1);
    const int hw = dy.dim(2) * dy.dim(3);
    const double count = static_cast<double>(n_batch) * hw;
    for (int ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int b = 0; b < n_batch; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int j = 0; j < hw; ++j) {
          sum_dy += dy[off + j];
          sum_dy_xhat += static_cast<double>(dy[off + j]) * xhat[off + j];
        }
      }
      g[kGamma][ch] += static_cast<T>(sum_dy_xhat);
      g[kBeta][ch] += static_cast<T>(sum_dy);
      const double gamma = l.param[kGamma][ch];
      const double is = inv_std[ch];
      for (int b = 0; b < n_batch; ++b) {
        const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
        for (int j = 0; j < hw; ++j) {
          if (phase != Phase::kEval) {
            dy[off + j] = static_cast<T>(gamma * is / count *
                                         (count * dy[off + j] - sum_dy - xhat[off + j] * sum_dy_xhat));
          } else {
            dy[off + j] = static_cast<T>(gamma * is * dy[off + j]);
          }
        }
      }
    }
  }

  void forward_conv(ModelState<T>& model, std::size_t i, ForwardCache<T>& cache, int n_batch) const {
    const NetGraph& g = *graph_;
    const Node& n = g.node(i);
    const Node& src = g.node(n.inputs[0]);
    auto& l = model.layers[i];
    const Tensor<T>& x = cache.out[n.inputs[0]];
    const int cin = src.channels, h = src.height, w = src.width;
    const int cout = n.channels, ho = n.height, wo = n.width, k = n.kernel;
    const int hw = ho * wo;
    Tensor<T> y({n_batch, cout, ho, wo}, T(0));
    const T* wt = l.param[kWeight].ptr();

    if (n.kind == NodeKind::kNormalConv) {
      const int rows = cin * k * k;
      std::vector<T> col(static_cast<std::size_t>(rows) * hw);
      for (int b = 0; b < n_batch; ++b) {
        detail::im2col(x.ptr() + static_cast<std::size_t>(b) * cin * h * w, cin, h, w, k, n.stride, n.pad, ho, wo,
                       col.data());
        T* out = y.ptr() + static_cast<std::size_t>(b) * cout * hw;
        for (int co = 0; co < cout; ++co) {
          T* orow = out + static_cast<std::size_t>(co) * hw;
          const T* wrow = wt + static_cast<std::size_t>(co) * rows;
          for (int r = 0; r < rows; ++r) {
            const T wv = wrow[r];
            const T* crow = col.data() + static_cast<std::size_t>(r) * hw;
            for (int j = 0; j < hw; ++j) orow[j] += wv * crow[j];
          }
        }
      }
    } else {
      for (int b = 0; b < n_batch; ++b) {
        for (int c = 0; c < cout; ++c) {
          const T* xin = x.ptr() + (static_cast<std::size_t>(b) * cin + c) * h * w;
          T* out = y.ptr() + (static_cast<std::size_t>(b) * cout + c) * hw;
          const T* wk = wt + static_cast<std::size_t>(c) * k * k;
          for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
              T acc = 0;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * n.stride - n.pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * n.stride - n.pad + kx;
                  if (ix >= 0 && ix < w) acc += wk[ky * k + kx] * xin[iy * w + ix];
                }
              }
              out[oy * wo + ox] = acc;
            }
          }
        }
      }
    }

    if (n.bn) {
      batch_norm_forward(l, y, cache.phase, cache.xhat[i], cache.inv_std[i]);
    } else {
      const auto& bias = l.param[kBias];
      for (int b = 0; b < n_batch; ++b) {
        for (int c = 0; c < cout; ++c) {
          T* p = y.ptr() + (static_cast<std::size_t>(b) * cout + c) * hw;
          for (int j = 0; j < hw; ++j) p[j] += bias[c];
        }
      }
    }
    if (n.relu) {
      for (auto& v : y.data) v = std::max(v, T(0));
    }
    const auto& mask = cache.masks[groups_[i]];
    Tensor<T> masked = y;
    for (int b = 0; b < n_batch; ++b) {
      for (int c = 0; c < cout; ++c) {
        T* p = masked.ptr() + (static_cast<std::size_t>(b) * cout + c) * hw;
        const T m = mask[c];
        for (int j = 0; j < hw; ++j) p[j] *= m;
      }
    }
    cache.act[i] = std::move(y);
    cache.out[i] = std::move(masked);
  }

  Tensor<T> backward_conv(const ModelState<T>& model, std::size_t i, ForwardCache<T>& cache, Tensor<T>& dy,
                          Gradients<T>& grads, int n_batch) const {
    const NetGraph& g = *graph_;
    const Node& n = g.node(i);
    const Node& src = g.node(n.inputs[0]);
    const auto& l = model.layers[i];
    const int k_group = groups_[i];
    const auto& mask = cache.masks[k_group];
    const Tensor<T>& act = cache.act[i];
    const int cin = src.channels, h = src.height, w = src.width;
    const int cout = n.channels, ho = n.height, wo = n.width, k = n.kernel;
    const int hw = ho * wo;

    auto& dmask = grads.dl_dmask[k_group];
    for (int b = 0; b < n_batch; ++b) {
      for (int c = 0; c < cout; ++c) {
        const std::size_t off = (static_cast<std::size_t>(b) * cout + c) * hw;
        double acc = 0.0;
        for (int j = 0; j < hw; ++j) acc += static_cast<double>(dy[off + j]) * act[off + j];
        dmask[c] += acc;
        const T m = mask[c];
        for (int j = 0; j < hw; ++j) {
          T v = dy[off + j] * m;
          if (n.relu && !(act[off + j] > T(0))) v = T(0);
          dy[off + j] = v;
        }
      }
    }
    auto& pg = grads.param[i];
    if (n.bn) {
      batch_norm_backward(l, dy, cache.xhat[i], cache.inv_std[i], cache.phase, pg);
    } else {
      for (int b = 0; b < n_batch; ++b) {
        for (int c = 0; c < cout; ++c) {
          const T* p = dy.ptr() + (static_cast<std::size_t>(b) * cout + c) * hw;
          double acc = 0.0;
          for (int j = 0; j < hw; ++j) acc += p[j];
          pg[kBias][c] += static_cast<T>(acc);
        }
      }
    }

    const Tensor<T>& x = cache.out[n.inputs[0]];
    Tensor<T> dx({n_batch, cin, h, w}, T(0));
    const T* wt = l.param[kWeight].ptr();
    T* dw = pg[kWeight].ptr();
    if (n.kind == NodeKind::kNormalConv) {
      const int rows = cin * k * k;
      std::vector<T> col(static_cast<std::size_t>(rows) * hw);
      std::vector<T> dcol(col.size());
      for (int b = 0; b < n_batch; ++b) {
        detail::im2col(x.ptr() + static_cast<std::size_t>(b) * cin * h * w, cin, h, w, k, n.stride, n.pad, ho, wo,
                       col.data());
        std::fill(dcol.begin(), dcol.end(), T(0));
        const T* d = dy.ptr() + static_cast<std::size_t>(b) * cout * hw;
        for (int co = 0; co < cout; ++co) {
          const T* drow = d + static_cast<std::size_t>(co) * hw;
          T* dwrow = dw + static_cast<std::size_t>(co) * rows;
          const T* wrow = wt + static_cast<std::size_t>(co) * rows;
          for (int r = 0; r < rows; ++r) {
            const T* crow = col.data() + static_cast<std::size_t>(r) * hw;
            T acc = 0;
            for (int j = 0; j < hw; ++j) acc += drow[j] * crow[j];
            dwrow[r] += acc;
            const T wv = wrow[r];
            T* dcrow = dcol.data() + static_cast<std::size_t>(r) * hw;
            for (int j = 0; j < hw; ++j) dcrow[j] += wv * drow[j];
          }
        }
        detail::col2im(dcol.data(), cin, h, w, k, n.stride, n.pad, ho, wo,
                       dx.ptr() + static_cast<std::size_t>(b) * cin * h * w);
      }
    } else {
      for (int b = 0; b < n_batch; ++b) {
        for (int c = 0; c < cout; ++c) {
          const T* xin = x.ptr() + (static_cast<std::size_t>(b) * cin + c) * h * w;
          T* dxin = dx.ptr() + (static_cast<std::size_t>(b) * cin + c) * h * w;
          const T* d = dy.ptr() + (static_cast<std::size_t>(b) * cout + c) * hw;
          const T* wk = wt + static_cast<std::size_t>(c) * k * k;
          T* dwk = dw + static_cast<std::size_t>(c) * k * k;
          for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
              const T dv = d[oy * wo + ox];
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * n.stride - n.pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * n.stride - n.pad + kx;
                  if (ix < 0 || ix >= w) continue;
                  dwk[ky * k + kx] += dv * xin[iy * w + ix];
                  dxin[iy * w + ix] += dv * wk[ky * k + kx];
                }
              }
            }
          }
        }
      }
    }
    return dx;
  }

  void forward_concat(std::size_t i, ForwardCache<T>& cache, int n_batch) const {
    const Node& n = graph_->node(i);
    const int hw = n.height * n.width;
    Tensor<T> y({n_batch, n.channels, n.height, n.width});
    int offset = 0;
    for (std::size_t p : n.inputs) {
      const auto& x = cache.out[p];
      const int c = x.dim(1);
      for (int b = 0; b < n_batch; ++b) {
        std::copy_n(x.ptr() + static_cast<std::size_t>(b) * c * hw, static_cast<std::size_t>(c) * hw,
                    y.ptr() + (static_cast<std::size_t>(b) * n.channels + offset) * hw);
      }
      offset += c;
    }
    cache.out[i] = std::move(y);
  }

  template <typename Acc>
  void backward_concat(std::size_t i, ForwardCache<T>& cache, const Tensor<T>& dy, int n_batch, Acc& accumulate) const {
    const Node& n = graph_->node(i);
    const int hw = n.height * n.width;
    int offset = 0;
    for (std::size_t p : n.inputs) {
      const auto& x = cache.out[p];
      const int c = x.dim(1);
      Tensor<T> dx(x.shape);
      for (int b = 0; b < n_batch; ++b) {
        std::copy_n(dy.ptr() + (static_cast<std::size_t>(b) * n.channels + offset) * hw,
                    static_cast<std::size_t>(c) * hw, dx.ptr() + static_cast<std::size_t>(b) * c * hw);
      }
      accumulate(p, dx);
      offset += c;
    }
  }

  void forward_pool(std::size_t i, ForwardCache<T>& cache, int n_batch) const {
    const Node& n = graph_->node(i);
    const Node& src = graph_->node(n.inputs[0]);
    const auto& x = cache.out[n.inputs[0]];
    const int c = n.channels, h = src.height, w = src.width, ho = n.height, wo = n.width;
    Tensor<T> y({n_batch, c, ho, wo});
    const bool is_max = n.pool_mode == PoolMode::kMax;
    const int k = n.global_pool ? 0 : n.kernel;
    const int ky_n = n.global_pool ? h : k, kx_n = n.global_pool ? w : k;
    const int stride = n.global_pool ? 1 : n.stride;
    auto& arg = cache.argmax[i];
    if (is_max) arg.assign(y.size(), 0);
    for (int b = 0; b < n_batch; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        const T* xin = x.ptr() + (static_cast<std::size_t>(b) * c + ch) * h * w;
        const std::size_t obase = (static_cast<std::size_t>(b) * c + ch) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            double acc = 0.0;
            T best = -std::numeric_limits<T>::infinity();
            int best_idx = 0;
            for (int ky = 0; ky < ky_n; ++ky) {
              for (int kx = 0; kx < kx_n; ++kx) {
                const int idx = (oy * stride + ky) * w + ox * stride + kx;
                acc += xin[idx];
                if (xin[idx] > best) {
                  best = xin[idx];
                  best_idx = idx;
                }
              }
            }
            const std::size_t o = obase + oy * wo + ox;
            if (is_max) {
              y[o] = best;
              arg[o] = best_idx;
            } else {
              y[o] = static_cast<T>(acc / (ky_n * kx_n));
            }
          }
        }
      }
    }
    cache.out[i] = std::move(y);
  }

  Tensor<T> backward_pool(std::size_t i, const ForwardCache<T>& cache, const Tensor<T>& dy, int n_batch) const {
    const Node& n = graph_->node(i);
    const Node& src = graph_->node(n.inputs[0]);
    const int c = n.channels, h = src.height, w = src.width, ho = n.height, wo = n.width;
    Tensor<T> dx({n_batch, c, h, w}, T(0));
    const bool is_max = n.pool_mode == PoolMode::kMax;
    const int ky_n = n.global_pool ? h : n.kernel, kx_n = n.global_pool ? w : n.kernel;
    const int stride = n.global_pool ? 1 : n.stride;
    const T scale = T(1) / static_cast<T>(ky_n * kx_n);
    for (int b = 0; b < n_batch; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        T* dxin = dx.ptr() + (static_cast<std::size_t>(b) * c + ch) * h * w;
        const std::size_t obase = (static_cast<std::size_t>(b) * c + ch) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const std::size_t o = obase + oy * wo + ox;
            if (is_max) {
              dxin[cache.argmax[i][o]] += dy[o];
              continue;
            }
            for (int ky = 0; ky < ky_n; ++ky) {
              for (int kx = 0; kx < kx_n; ++kx) dxin[(oy * stride + ky) * w + ox * stride + kx] += dy[o] * scale;
            }
          }
        }
      }
    }
    return dx;
  }

  void forward_dense(const LayerState<T>& l, std::size_t i, ForwardCache<T>& cache, int n_batch) const {
    const Node& n = graph_->node(i);
    const auto& x = cache.out[n.inputs[0]];
    const int in = x.dim(1), out = n.channels;
    Tensor<T> y({n_batch, out, 1, 1});
    for (int b = 0; b < n_batch; ++b) {
      const T* xr = x.ptr() + static_cast<std::size_t>(b) * in;
      for (int o = 0; o < out; ++o) {
        const T* wr = l.param[kWeight].ptr() + static_cast<std::size_t>(o) * in;
        T acc = l.param[kBias][o];
        for (int j = 0; j < in; ++j) acc += wr[j] * xr[j];
        y[static_cast<std::size_t>(b) * out + o] = acc;
      }
    }
    cache.out[i] = std::move(y);
  }

  Tensor<T> backward_dense(const LayerState<T>& l, std::size_t i, const ForwardCache<T>& cache, const Tensor<T>& dy,
                           std::array<Tensor<T>, kNumSlots>& g, int n_batch) const {
    const Node& n = graph_->node(i);
    const auto& x = cache.out[n.inputs[0]];
    const int in = x.dim(1), out = n.channels;
    Tensor<T> dx(x.shape, T(0));
    for (int b = 0; b < n_batch; ++b) {
      const T* xr = x.ptr() + static_cast<std::size_t>(b) * in;
      T* dxr = dx.ptr() + static_cast<std::size_t>(b) * in;
      for (int o = 0; o < out; ++o) {
        const T d = dy[static_cast<std::size_t>(b) * out + o];
        const T* wr = l.param[kWeight].ptr() + static_cast<std::size_t>(o) * in;
        T* gw = g[kWeight].ptr() + static_cast<std::size_t>(o) * in;
        g[kBias][o] += d;
        for (int j = 0; j < in; ++j) {
          gw[j] += d * xr[j];
          dxr[j] += d * wr[j];
        }
      }
    }
    return dx;
  }

  const NetGraph* graph_;
  GroupAssignment groups_;
  std::vector<int> group_channels_;
  std::size_t sink_;
  int num_classes_ = 0;
};

}  // namespace dsa::nn
