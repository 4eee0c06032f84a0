// Copyright 2026 The Modscope Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "modscope/errors.h"
#include "modscope/model.h"
#include "modscope/modularity.h"
#include "modscope/partition.h"
#include "modscope/perturbation.h"
#include "modscope/planted.h"
#include "modscope/predictivity.h"
#include "support.h"

namespace modscope {
namespace {

PredictivityTable RampTable(int d_ff) {
  PredictivityTable t;
  t.layers = {0};
  t.d_ff = d_ff;
  t.sub_functions = {"a", "b"};
  Matrix ap(2, d_ff);
  for (int j = 0; j < d_ff; ++j) {
    ap(0, j) = 0.5 + 0.4 * j / d_ff;        // favours high indices
    ap(1, j) = 0.9 - 0.4 * j / d_ff;        // favours low indices
  }
  t.ap = {ap};
  return t;
}

TEST(PerturbationTest, NoiseHasRequestedVariance) {
  Model m = InitModel({.vocab_size = 5, .d_model = 3, .d_ff = 4}, 7);
  m.layers[0].w_out.setZero();
  m.layers[0].w_out(0, 2) = 1.0;
  PerturbationPlan plan;
  plan.targets[0] = {2};
  const std::vector<int> tokens{1, 2, 3, 4, 0, 1, 2, 3, 4, 0};
  const ForwardTrace clean = EncoderForward(m, tokens);
  std::vector<double> draws;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const ForwardTrace noisy = NoiseForward(m, plan, tokens, seed);
    for (int p = 0; p < 10; ++p) {
      draws.push_back(noisy.output(p, 0) - clean.output(p, 0));
      EXPECT_EQ(noisy.output(p, 1), clean.output(p, 1));
    }
  }
  const double n = static_cast<double>(draws.size());
  const double mean = std::accumulate(draws.begin(), draws.end(), 0.0) / n;
  double var = 0.0;
  for (double d : draws) var += (d - mean) * (d - mean);
  var /= n - 1;
  EXPECT_LT(std::abs(mean), 4 * 2.0 / std::sqrt(n));
  EXPECT_NEAR(var, 4.0, 4.0 * 0.05);
  EXPECT_EQ(NoiseForward(m, plan, tokens, 3).output, NoiseForward(m, plan, tokens, 3).output);
}

TEST(PerturbationTest, EmptyTargetsLeaveOutputBitEqual) {
  std::mt19937_64 rng(51);
  const Model m = InitModel(testing::RandomConfig(rng, true, true), 2);
  const std::vector<int> tokens{0, 1, 2, 1, 0};
  PerturbationPlan plan;
  plan.targets[0] = {};
  EXPECT_EQ(NoiseForward(m, plan, tokens, 9).output, EncoderForward(m, tokens).output);
}

TEST(PerturbationTest, RouteRestriction) {
  std::mt19937_64 rng(52);
  ModelConfig c{.vocab_size = 6, .d_model = 4, .d_ff = 16, .moe_layers = {0},
                .num_experts = 4, .top_k = 1, .use_bias = true};
  const Model m = InitModel(c, 3);
  const std::vector<int> tokens{0, 1, 2, 3, 4, 5};
  const Model all = RestrictRouting(m, {{0, {0, 1, 2, 3}}});
  EXPECT_EQ(EncoderForward(all, tokens).output, EncoderForward(m, tokens).output);
  const Model forced = RestrictRouting(m, {{0, {2}}});
  const ForwardTrace t = EncoderForward(forced, tokens);
  for (int p = 0; p < 6; ++p) {
    EXPECT_EQ(t.gate_weights[0](p, 2), 1.0);
    EXPECT_EQ(t.gate_weights[0].row(p).sum(), 1.0);
  }
  const Model ab = RestrictRouting(m, {{0, {3, 1}}}), ba = RestrictRouting(m, {{0, {1, 3, 1}}});
  EXPECT_EQ(EncoderForward(ab, tokens).output, EncoderForward(ba, tokens).output);
  EXPECT_THROW(RestrictRouting(m, {{0, {}}}), ConfigError);
  EXPECT_THROW(RestrictRouting(m, {{0, {4}}}), ConfigError);
  EXPECT_THROW(RestrictRouting(InitModel({.vocab_size = 4, .d_model = 2, .d_ff = 4}, 1),
                               {{0, {0}}}),
               ConfigError);
}

TEST(PerturbationTest, TargetCountRounds) {
  EXPECT_EQ(TargetCount(0.1, 64), 6);
  EXPECT_EQ(TargetCount(0.1, 16), 2);
  EXPECT_EQ(TargetCount(0.05, 10), 1);
  EXPECT_EQ(TargetCount(0.0, 10), 0);
  EXPECT_THROW(TargetCount(1.2, 10), ConfigError);
}

TEST(PerturbationTest, PlansFollowTheRankingBasis) {
  const PredictivityTable t = RampTable(64);
  const int layers[] = {0};
  const std::vector<std::string> seen_a{"a"};
  const auto single = BuildNoisePlan(t, seen_a, nullptr, layers, 0.1,
                                     RankingBasis::kSingleDataset, 0);
  EXPECT_EQ(single.targets.at(0), (std::vector<int>{58, 59, 60, 61, 62, 63}));
  Partition blocks;
  blocks.layers.push_back(BlockPartition(0, 64, 16));
  const std::vector<std::string> seen_b{"b"};
  const auto experts = BuildNoisePlan(t, seen_b, &blocks, layers, 0.1,
                                      RankingBasis::kExpertSum, 0);
  EXPECT_EQ(experts.targets.at(0), (std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7}));
  const auto r1 = BuildNoisePlan(t, seen_b, &blocks, layers, 0.1, RankingBasis::kRandom, 4);
  const auto r2 = BuildNoisePlan(t, seen_b, &blocks, layers, 0.1, RankingBasis::kRandom, 4);
  EXPECT_EQ(r1.targets, r2.targets);
  EXPECT_EQ(r1.targets.at(0).size(), experts.targets.at(0).size());
  const auto dense_random =
      BuildNoisePlan(t, seen_b, nullptr, layers, 0.1, RankingBasis::kRandom, 4);
  EXPECT_EQ(dense_random.targets.at(0).size(), 6u);
  const std::vector<std::string> both{"a", "b"};
  EXPECT_THROW(BuildNoisePlan(t, both, nullptr, layers, 0.1, RankingBasis::kSingleDataset, 0),
               ConfigError);
  EXPECT_THROW(BuildNoisePlan(t, seen_b, nullptr, layers, 0.1, RankingBasis::kExpertSum, 0),
               ConfigError);
}

TEST(PerturbationTest, PlanJsonRoundTrip) {
  PerturbationPlan plan;
  plan.mode = PerturbationMode::kRouteRestrict;
  plan.targets = {{0, {1, 2}}, {2, {0}}};
  plan.layers = {0, 2};
  plan.ranking_basis = RankingBasis::kExpertSum;
  const PerturbationPlan back = PlanFromJson(PlanToJson(plan));
  EXPECT_EQ(back.mode, plan.mode);
  EXPECT_EQ(back.targets, plan.targets);
  EXPECT_EQ(back.layers, plan.layers);
  EXPECT_EQ(back.ranking_basis, plan.ranking_basis);
  EXPECT_THROW(PlanFromJson({{"mode", "melt"}}), ConfigError);
  EXPECT_THROW(PlanFromJson({{"ranking_basis", "psychic"}}), ConfigError);
  EXPECT_THROW(PlanFromJson({{"mode", "noise"}, {"noise_variance", -1.0}}).Validate(),
               ConfigError);
}

TEST(PerturbationTest, AllowListSplitsFunctionalExperts) {
  ExpertTestResult r;
  r.experts.resize(4);
  for (int e = 0; e < 4; ++e) r.experts[e].expert = e;
  r.experts[1].functional = true;
  r.experts[3].functional = true;
  EXPECT_EQ(AllowList(r, 4, true), (std::vector<int>{1, 3}));
  EXPECT_EQ(AllowList(r, 4, false), (std::vector<int>{0, 2}));
  r.experts[1].functional = r.experts[3].functional = false;
  EXPECT_THROW(AllowList(r, 4, true), ConfigError);
}

TEST(PerturbationTest, ReadoutSolvesPlantedTask) {
  PlantedSpec spec;
  spec.d_ff = 64;
  spec.num_experts = 8;
  const int experts[] = {0};
  PlantConcentrated(spec, "task", FunctionCategory::kTask, 2, 2, experts);
  const PlantedSuite planted = SynthPlantedSuite(spec, 3);
  const Model m = BuildPlantedModel(spec);
  const SubFunctionDataset& d = planted.suite.sub_functions[0];
  const Readout readout = TrainReadout(m, d);
  const double clean = EvaluateAccuracy(m, d, readout);
  EXPECT_GE(clean, 0.95);
  PerturbationPlan plan;
  plan.targets[0] = planted.truth.neurons.at(d.id);
  plan.noise_variance = 100.0;
  const double one = EvaluateAccuracy(m, d, readout, &plan, 5, 1);
  EXPECT_EQ(one, EvaluateAccuracy(m, d, readout, &plan, 5, 4));
  EXPECT_LT(MeanPerturbedAccuracy(m, d, readout, plan, 5), clean);
}

TEST(PerturbationTest, ResultsCsv) {
  const PerturbationResult rows[] = {{"clean", 0.0, 1, 1.0}, {"experts", 0.1, 1, 0.75}};
  const std::string csv = ResultsToCsv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "condition,proportion,seed,accuracy");
  EXPECT_NE(csv.find("experts,0.1,1,0.75"), std::string::npos);
}

}  // namespace
}  // namespace modscope
