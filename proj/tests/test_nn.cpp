// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "dsa/nn.hpp"
#include "dsa/prune.hpp"
#include "gradcheck.hpp"

using dsa::NetGraph;
using dsa::Tensor;
using nlohmann::json;
namespace nn = dsa::nn;

using namespace dsa::testing;

namespace {

NetGraph small_net() {
  return NetGraph::from_json(layer_cases()[4].doc);
}

}  // namespace

class LayerGradients : public ::testing::TestWithParam<int> {};

TEST_P(LayerGradients, TrainPhaseMatchesFiniteDifferences) {
  const auto c = layer_cases()[GetParam()];
  const auto g = NetGraph::from_json(c.doc);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = gradient_check(g, nn::Phase::kTrain, seed);
    EXPECT_LT(r.worst_rel, 1e-4) << c.name << " worst at " << r.where;
  }
}

TEST_P(LayerGradients, EvalPhaseMatchesFiniteDifferences) {
  const auto c = layer_cases()[GetParam()];
  const auto g = NetGraph::from_json(c.doc);
  const auto r = gradient_check(g, nn::Phase::kEval, 4);
  EXPECT_LT(r.worst_rel, 1e-4) << c.name << " worst at " << r.where;
}

TEST_P(LayerGradients, BatchStatsPhaseMatchesFiniteDifferences) {
  const auto c = layer_cases()[GetParam()];
  const auto g = NetGraph::from_json(c.doc);
  const auto r = gradient_check(g, nn::Phase::kBatchStats, 5);
  EXPECT_LT(r.worst_rel, 1e-4) << c.name << " worst at " << r.where;
}

INSTANTIATE_TEST_SUITE_P(AllLayerKinds, LayerGradients, ::testing::Range(0, 8));

TEST(Forward, AllOnesMasksMatchUnmaskedBitForBit) {
  const auto g = small_net();
  nn::Executor<double> ex(g, dsa::topological_group(g));
  std::mt19937_64 rng(3);
  auto model = nn::init_model<double>(g, 3);
  auto b = random_batch(rng, 4, 2, 4, 4, 3);
  nn::MaskSet ones;
  for (int c : ex.group_channels()) ones.emplace_back(c, 1.0);
  auto m1 = model, m2 = model;
  const auto a = ex.forward(m1, b, {}, nn::MaskMode::kSampled, nn::Phase::kTrain);
  const auto o = ex.forward(m2, b, ones, nn::MaskMode::kSampled, nn::Phase::kTrain);
  EXPECT_EQ(a.loss, o.loss);
  EXPECT_EQ(a.cache.probs.data, o.cache.probs.data);
}

TEST(Forward, ZeroClassifierGivesLogClasses) {
  const auto g = small_net();
  nn::Executor<double> ex(g, dsa::topological_group(g));
  std::mt19937_64 rng(5);
  auto model = nn::init_model<double>(g, 5, {.zero_classifier = true});
  auto b = random_batch(rng, 6, 2, 4, 4, 3);
  const auto r = ex.forward(model, b, {}, nn::MaskMode::kSampled, nn::Phase::kTrain);
  EXPECT_NEAR(r.loss, std::log(3.0), 1e-12);
}

TEST(Forward, RelaxedWithBinaryProbabilitiesEqualsSampled) {
  const auto g = small_net();
  nn::Executor<double> ex(g, dsa::topological_group(g));
  std::mt19937_64 rng(6);
  auto model = nn::init_model<double>(g, 6);
  auto b = random_batch(rng, 4, 2, 4, 4, 3);
  nn::MaskSet m;
  for (int c : ex.group_channels()) {
    std::vector<double> v(c, 1.0);
    v[0] = 0.0;
    m.push_back(v);
  }
  auto m1 = model, m2 = model;
  EXPECT_EQ(ex.forward(m1, b, m, nn::MaskMode::kSampled, nn::Phase::kTrain).loss,
            ex.forward(m2, b, m, nn::MaskMode::kRelaxed, nn::Phase::kTrain).loss);
}

TEST(Forward, RejectsNonBinarySampledMasksAndBadLengths) {
  const auto g = small_net();
  nn::Executor<double> ex(g, dsa::topological_group(g));
  std::mt19937_64 rng(6);
  auto model = nn::init_model<double>(g, 6);
  auto b = random_batch(rng, 2, 2, 4, 4, 3);
  nn::MaskSet m;
  for (int c : ex.group_channels()) m.emplace_back(c, 0.5);
  EXPECT_THROW(ex.forward(model, b, m, nn::MaskMode::kSampled, nn::Phase::kTrain), dsa::ShapeError);
  m[0].push_back(1.0);
  EXPECT_THROW(ex.forward(model, b, m, nn::MaskMode::kRelaxed, nn::Phase::kTrain), dsa::ShapeError);
  auto bad = random_batch(rng, 2, 1, 4, 4, 3);
  EXPECT_THROW(ex.forward(model, bad, {}, nn::MaskMode::kSampled, nn::Phase::kTrain), dsa::ShapeError);
}

TEST(Forward, TrainUpdatesRunningStatsEvalDoesNot) {
  const auto g = small_net();
  nn::Executor<double> ex(g, dsa::topological_group(g));
  std::mt19937_64 rng(8);
  auto model = nn::init_model<double>(g, 8);
  auto b = random_batch(rng, 4, 2, 4, 4, 3);
  const auto before = model.layers[1].running_mean.data;
  ex.forward(model, b, {}, nn::MaskMode::kSampled, nn::Phase::kEval);
  EXPECT_EQ(model.layers[1].running_mean.data, before);
  ex.forward(model, b, {}, nn::MaskMode::kSampled, nn::Phase::kTrain);
  EXPECT_NE(model.layers[1].running_mean.data, before);
}

TEST(Forward, BatchStatsMatchesTrainWithoutUpdatingRunningStats) {
  const auto g = small_net();
  nn::Executor<double> ex(g, dsa::topological_group(g));
  std::mt19937_64 rng(8);
  auto model = nn::init_model<double>(g, 8);
  auto b = random_batch(rng, 4, 2, 4, 4, 3);
  const auto frozen = model;
  const double loss = ex.forward(model, b, {}, nn::MaskMode::kSampled, nn::Phase::kBatchStats).loss;
  EXPECT_EQ(model.layers[1].running_mean.data, frozen.layers[1].running_mean.data);
  EXPECT_EQ(model.layers[1].running_var.data, frozen.layers[1].running_var.data);
  EXPECT_EQ(ex.forward(model, b, {}, nn::MaskMode::kSampled, nn::Phase::kTrain).loss, loss);
}

TEST(Forward, MaskedChannelsStillUpdateRunningStats) {
  const auto g = small_net();
  auto ga = dsa::topological_group(g);
  nn::Executor<double> ex(g, ga);
  std::mt19937_64 rng(8);
  auto model = nn::init_model<double>(g, 8);
  auto b = random_batch(rng, 4, 2, 4, 4, 3);
  nn::MaskSet zeros;
  for (int c : ex.group_channels()) zeros.emplace_back(c, 0.0);
  const auto before = model.layers[1].running_var.data;
  ex.forward(model, b, zeros, nn::MaskMode::kHard, nn::Phase::kTrain);
  EXPECT_NE(model.layers[1].running_var.data, before);
}

TEST(Backward, CacheConsumedOnce) {
  const auto g = small_net();
  nn::Executor<double> ex(g, dsa::topological_group(g));
  std::mt19937_64 rng(9);
  auto model = nn::init_model<double>(g, 9);
  auto b = random_batch(rng, 2, 2, 4, 4, 3);
  auto r = ex.forward(model, b, {}, nn::MaskMode::kSampled, nn::Phase::kTrain);
  ex.backward(r.cache);
  EXPECT_THROW(ex.backward(r.cache), std::logic_error);
}

TEST(Backward, DeadChannelHasZeroMaskGradient) {
  const auto g = small_net();
  auto ga = dsa::topological_group(g);
  nn::Executor<double> ex(g, ga);
  std::mt19937_64 rng(10);
  auto model = nn::init_model<double>(g, 10);
  const std::size_t c2 = g.index_of("c2");
  model.layers[c2].param[nn::kGamma][1] = 0.0;
  model.layers[c2].param[nn::kBeta][1] = 0.0;
  auto b = random_batch(rng, 3, 2, 4, 4, 3);
  auto r = ex.forward(model, b, {}, nn::MaskMode::kSampled, nn::Phase::kTrain);
  const auto grads = ex.backward(r.cache);
  EXPECT_EQ(grads.dl_dmask[ga[c2]][1], 0.0);
  EXPECT_NE(grads.dl_dmask[ga[c2]][0], 0.0);
}

TEST(Backward, GroupMembersShareOneMask) {
  const auto g = small_net();
  auto ga = dsa::topological_group(g);
  EXPECT_EQ(ga[g.index_of("c1")], ga[g.index_of("c3")]);
  nn::Executor<double> ex(g, ga);
  EXPECT_EQ(ex.group_channels()[ga[g.index_of("c1")]], 3);
}

TEST(Sgd, ZeroLearningRateLeavesModel) {
  const auto g = small_net();
  nn::Executor<double> ex(g, dsa::topological_group(g));
  std::mt19937_64 rng(12);
  auto model = nn::init_model<double>(g, 12);
  auto b = random_batch(rng, 2, 2, 4, 4, 3);
  auto r = ex.forward(model, b, {}, nn::MaskMode::kSampled, nn::Phase::kTrain);
  const auto grads = ex.backward(r.cache);
  auto before = model;
  nn::sgd_step(model, grads, {.lr = 0.0});
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    for (int s = 0; s < nn::kNumSlots; ++s) EXPECT_EQ(model.layers[i].param[s].data, before.layers[i].param[s].data);
  }
}

TEST(Sgd, PlainAndMomentumSteps) {
  nn::ModelState<double> m;
  m.layers.resize(1);
  m.layers[0].param[nn::kWeight] = Tensor<double>({2}, 1.0);
  m.layers[0].velocity[nn::kWeight] = Tensor<double>({2}, 0.0);
  nn::Gradients<double> g;
  g.param.resize(1);
  g.param[0][nn::kWeight] = Tensor<double>({2}, 0.5);

  auto plain = m;
  nn::sgd_step(plain, g, {.lr = 0.1, .momentum = 0.0, .weight_decay = 0.0});
  EXPECT_DOUBLE_EQ(plain.layers[0].param[nn::kWeight][0], 1.0 - 0.1 * 0.5);

  auto mom = m;
  nn::sgd_step(mom, g, {.lr = 0.1, .momentum = 0.9, .weight_decay = 0.0});
  nn::sgd_step(mom, g, {.lr = 0.1, .momentum = 0.9, .weight_decay = 0.0});
  EXPECT_NEAR(1.0 - mom.layers[0].param[nn::kWeight][0], 0.1 * 0.5 * (1.0 + 1.9), 1e-15);
}

TEST(Sgd, WeightDecaySkipsBnParameters) {
  nn::ModelState<double> m;
  m.layers.resize(1);
  auto& l = m.layers[0];
  l.param[nn::kWeight] = Tensor<double>({1}, 2.0);
  l.param[nn::kGamma] = Tensor<double>({1}, 2.0);
  for (int s : {0, 2}) l.velocity[s] = Tensor<double>({1}, 0.0);
  nn::Gradients<double> g;
  g.param.resize(1);
  g.param[0][nn::kWeight] = Tensor<double>({1}, 0.0);
  g.param[0][nn::kGamma] = Tensor<double>({1}, 0.0);
  nn::sgd_step(m, g, {.lr = 1.0, .momentum = 0.0, .weight_decay = 0.1});
  EXPECT_DOUBLE_EQ(l.param[nn::kWeight][0], 2.0 - 0.2);
  EXPECT_EQ(l.param[nn::kGamma][0], 2.0);
}

TEST(Importance, BnScalesL1PerGroup) {
  const auto g = small_net();
  auto ga = dsa::topological_group(g);
  nn::Executor<double> ex(g, ga);
  auto model = nn::init_model<double>(g, 1);
  const std::size_t c1 = g.index_of("c1"), c3 = g.index_of("c3");
  model.layers[c1].param[nn::kGamma].data = {0.5, -1.0, 2.0};
  model.layers[c3].param[nn::kGamma].data = {-0.25, 0.0, 1.0};
  const auto imp = ex.group_importance(model);
  EXPECT_EQ(imp[ga[c1]], (std::vector<double>{0.75, 1.0, 3.0}));
}

TEST(Precision, FloatAndDoubleAgree) {
  const auto g = small_net();
  nn::Executor<double> exd(g, dsa::topological_group(g));
  nn::Executor<float> exf(g, dsa::topological_group(g));
  std::mt19937_64 rng(13);
  auto md = nn::init_model<double>(g, 13);
  auto mf = nn::init_model<float>(g, 13);
  auto bd = random_batch(rng, 4, 2, 4, 4, 3);
  nn::Batch<float> bf;
  bf.inputs = Tensor<float>(bd.inputs.shape);
  for (std::size_t i = 0; i < bd.inputs.size(); ++i) bf.inputs[i] = static_cast<float>(bd.inputs[i]);
  bf.labels = bd.labels;
  const double ld = exd.forward(md, bd, {}, nn::MaskMode::kSampled, nn::Phase::kTrain).loss;
  const double lf = exf.forward(mf, bf, {}, nn::MaskMode::kSampled, nn::Phase::kTrain).loss;
  EXPECT_NEAR(ld, lf, 1e-4);
}
