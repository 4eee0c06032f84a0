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


#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "modscope/checkpoint.h"
#include "modscope/dataset.h"
#include "modscope/errors.h"
#include "modscope/model.h"
#include "modscope/parallel.h"
#include "modscope/partition.h"
#include "support.h"

namespace modscope {
namespace {

using testing::DenseOracle;
using testing::ExpertOracle;
using testing::GateOracle;
using testing::RandomConfig;
using testing::RandomizeBiases;
using testing::RandomVector;

TEST(ModelTest, DenseForwardMatchesMatrixForm) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig c = RandomConfig(rng, false);
    Model m = InitModel(c, trial);
    RandomizeBiases(m, rng);
    for (int l = 0; l < c.num_layers; ++l) {
      const Vector x = RandomVector(c.d_model, rng);
      const FfnOutput out = FfnForward(m, l, x);
      EXPECT_LE((out.output - DenseOracle(m.layers[l], x, c.use_bias)).norm(), 1e-12);
      const Vector act = (m.layers[l].w_in * x).unaryExpr(&testing::Relu);
      EXPECT_LE((out.activations - act).norm(), 1e-12);
    }
  }
}

TEST(ModelTest, BiasInActivationOptIn) {
  std::mt19937_64 rng(3);
  ModelConfig c{.vocab_size = 8, .d_model = 4, .d_ff = 6, .use_bias = true,
                .bias_in_activation = true};
  Model m = InitModel(c, 1);
  RandomizeBiases(m, rng);
  const Vector x = RandomVector(4, rng);
  const Vector act = (m.layers[0].w_in * x + m.layers[0].b_in).unaryExpr(&testing::Relu);
  EXPECT_LE((FfnForward(m, 0, x).activations - act).norm(), 1e-12);
}

TEST(ModelTest, RouterMatchesOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    ModelConfig c = RandomConfig(rng, true);
    Model m = InitModel(c, trial);
    RandomizeBiases(m, rng);
    const int l = c.moe_layers.front();
    const Vector x = RandomVector(c.d_model, rng);
    const Vector g = RouterGates(m, l, x);
    EXPECT_LE((g - GateOracle(m.layers[l].gate, x, c.top_k)).norm(), 1e-12);
    EXPECT_EQ((g.array() > 0).count(), c.top_k);
    const MoeOutput out = MoeForward(m, l, x);
    EXPECT_LE((out.output - ExpertOracle(m.layers[l], x, g, c.num_experts, c.use_bias)).norm(),
              1e-12);
    // Activations are recorded for unselected experts too.
    const Vector all = (m.layers[l].w_in * x).unaryExpr(&testing::Relu);
    EXPECT_LE((out.activations - all).norm(), 1e-12);
  }
}

TEST(ModelTest, AllowedExpertsRestrictRouter) {
  std::mt19937_64 rng(13);
  ModelConfig c{.vocab_size = 8, .d_model = 5, .d_ff = 12, .moe_layers = {0},
                .num_experts = 4, .top_k = 2};
  c.allowed_experts[0] = {1, 3};
  Model m = InitModel(c, 2);
  for (int i = 0; i < 20; ++i) {
    const Vector x = RandomVector(5, rng);
    const Vector g = RouterGates(m, 0, x);
    EXPECT_EQ(g[0], 0.0);
    EXPECT_EQ(g[2], 0.0);
    EXPECT_NEAR(g[1] + g[3], 1.0, 1e-12);
    EXPECT_LE((g - GateOracle(m.layers[0].gate, x, 2, {1, 3})).norm(), 1e-12);
  }
}

TEST(ModelTest, TiesRouteToLowerIndex) {
  ModelConfig c{.vocab_size = 4, .d_model = 2, .d_ff = 4, .moe_layers = {0},
                .num_experts = 4, .top_k = 1};
  Model m = InitModel(c, 0);
  m.layers[0].gate.setZero();
  const Vector g = RouterGates(m, 0, Vector::Ones(2));
  EXPECT_DOUBLE_EQ(g[0], 0.25);
  EXPECT_EQ((g.array() > 0).count(), 1);
}

TEST(ModelTest, ConfigValidation) {
  ModelConfig c{.vocab_size = 8, .d_model = 4, .d_ff = 10, .moe_layers = {0},
                .num_experts = 4, .top_k = 1};
  EXPECT_THROW(c.Validate(), ConfigError);
  c.d_ff = 8;
  EXPECT_NO_THROW(c.Validate());
  c.top_k = 5;
  EXPECT_THROW(c.Validate(), ConfigError);
  c.top_k = 1;
  c.moe_layers = {3};
  EXPECT_THROW(c.Validate(), ConfigError);
}

TEST(ModelTest, EncoderRejectsBadTokens) {
  Model m = InitModel({.vocab_size = 5, .d_model = 3, .d_ff = 4}, 1);
  const std::vector<int> bad{1, 5};
  EXPECT_THROW(EncoderForward(m, bad), ValidationError);
  EXPECT_THROW(EncoderForward(m, std::span<const int>()), ValidationError);
}

TEST(ModelTest, HookSeesEveryPositionAndChangesOutput) {
  std::mt19937_64 rng(4);
  ModelConfig c = RandomConfig(rng, true, true);
  Model m = InitModel(c, 5);
  const std::vector<int> tokens{0, 1, 2, 1};
  int calls = 0;
  ForwardOptions zero;
  zero.activation_hook = [&](int, int, Eigen::Ref<Vector> a) {
    ++calls;
    a.setZero();
  };
  const ForwardTrace clean = EncoderForward(m, tokens);
  const ForwardTrace hooked = EncoderForward(m, tokens, zero);
  EXPECT_EQ(calls, c.num_layers * 4);
  EXPECT_GT((clean.output - hooked.output).norm(), 0.0);
  // Recorded activations are taken before the hook runs.
  EXPECT_EQ(clean.neuron_activations[0], hooked.neuron_activations[0]);
}

TEST(ModelTest, InitIsDeterministicAndFloatRounded) {
  ModelConfig c{.vocab_size = 6, .d_model = 4, .d_ff = 8};
  const Model a = InitModel(c, 9), b = InitModel(c, 9), d = InitModel(c, 10);
  EXPECT_EQ(a.layers[0].w_in, b.layers[0].w_in);
  EXPECT_NE(a.layers[0].w_in, d.layers[0].w_in);
  for (Eigen::Index i = 0; i < a.embedding.size(); ++i) {
    const double v = a.embedding.data()[i];
    EXPECT_EQ(v, static_cast<double>(static_cast<float>(v)));
  }
}

TEST(CheckpointTest, RoundTripIsExact) {
  std::mt19937_64 rng(21);
  for (bool moe : {false, true}) {
    ModelConfig c = RandomConfig(rng, moe, true);
    c.allowed_experts.clear();
    Model m = InitModel(c, 3);
    RandomizeBiases(m, rng);
    RoundToFloat(m);
    const Checkpoint back = DecodeCheckpoint(EncodeCheckpoint(m, {.step = 42}));
    EXPECT_EQ(back.meta.step, 42);
    EXPECT_TRUE(back.model.config == m.config);
    EXPECT_EQ(back.model.embedding, m.embedding);
    for (size_t l = 0; l < m.layers.size(); ++l) {
      EXPECT_EQ(back.model.layers[l].w_in, m.layers[l].w_in);
      EXPECT_EQ(back.model.layers[l].w_out, m.layers[l].w_out);
      EXPECT_EQ(back.model.layers[l].b_in, m.layers[l].b_in);
      EXPECT_EQ(back.model.layers[l].gate, m.layers[l].gate);
      EXPECT_EQ(back.model.layers[l].wq, m.layers[l].wq);
    }
  }
}

TEST(CheckpointTest, CorruptionIsAParseError) {
  const Model m = InitModel({.vocab_size = 6, .d_model = 4, .d_ff = 8}, 1);
  std::string bytes = EncodeCheckpoint(m);
  EXPECT_THROW(DecodeCheckpoint(bytes.substr(0, bytes.size() - 3)), ParseError);
  EXPECT_THROW(DecodeCheckpoint(bytes.substr(0, 7)), ParseError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(DecodeCheckpoint(bad), ParseError);
  EXPECT_THROW(LoadCheckpoint("/nonexistent/model.ckpt"), IoError);
}

TEST(CheckpointTest, ConfigJsonRoundTrip) {
  ModelConfig c{.vocab_size = 9, .num_layers = 2, .d_model = 4, .d_ff = 8,
                .moe_layers = {1}, .num_experts = 2, .top_k = 1, .use_bias = true,
                .mixing = Mixing::kAttention, .num_heads = 2, .seed = 77};
  c.allowed_experts[1] = {0};
  EXPECT_TRUE(ConfigFromJson(ConfigToJson(c)) == c);
}

FunctionSuite SmallSuite() {
  FunctionSuite s;
  SubFunctionDataset a{.id = "negation", .category = FunctionCategory::kSemantic,
                       .function = "semantic"};
  a.instances = {{{1, 2}, 1}, {{2, 3}, 0}, {{3}, 1}, {{4, 1}, 0}};
  SubFunctionDataset b{.id = "mine", .category = FunctionCategory::kCustom,
                       .function = "group_x"};
  b.instances = {{{5}, 0}, {{6}, 1}};
  s.sub_functions = {a, b};
  return s;
}

TEST(DatasetTest, SuiteRoundTrip) {
  const FunctionSuite s = SmallSuite();
  EXPECT_EQ(ParseSuite(SerializeSuite(s)), s);
  EXPECT_EQ(s.Functions(), (std::vector<std::string>{"semantic", "group_x"}));
  EXPECT_EQ(s.IndexOf("mine"), 1);
  EXPECT_EQ(s.IndexOf("absent"), -1);
}

TEST(DatasetTest, HandWrittenJsonl) {
  const std::string text =
      "{\"sub_function\":\"s1\",\"category\":\"task\",\"tokens\":[1,2],\"label\":1}\n"
      "\n"
      "{\"sub_function\":\"s1\",\"category\":\"task\",\"tokens\":[3],\"label\":0}\r\n";
  const FunctionSuite s = ParseSuite(text);
  ASSERT_EQ(s.sub_functions.size(), 1u);
  EXPECT_EQ(s.sub_functions[0].function, "task");
  EXPECT_EQ(s.sub_functions[0].CountLabel(1), 1);
}

TEST(DatasetTest, MalformedInputReportsLine) {
  try {
    ParseSuite("{\"sub_function\":\"s\",\"category\":\"task\",\"tokens\":[1],\"label\":1}\n{oops\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 2u);
  }
  EXPECT_THROW(
      ParseSuite("{\"sub_function\":\"s\",\"category\":\"task\",\"tokens\":[1],\"label\":1}\n"),
      ValidationError);
}

TEST(DatasetTest, BalancedSubsample) {
  FunctionSuite s = SmallSuite();
  const auto sub = BalancedSubsample(s.sub_functions[0], 1, 5);
  EXPECT_EQ(sub.CountLabel(0), 1);
  EXPECT_EQ(sub.CountLabel(1), 1);
  EXPECT_EQ(BalancedSubsample(s.sub_functions[0], 1, 5), sub);
}

TEST(ParallelTest, CoversEveryIndexOnce) {
  std::vector<int> hits(1000, 0);
  ParallelFor(1000, [&](int i) { hits[i] += 1; }, 4);
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_GE(DefaultThreadCount(), 1);
}

TEST(PartitionTest, BlockAndRandom) {
  const LayerPartition block = BlockPartition(0, 12, 3);
  EXPECT_EQ(block.Members()[1], (std::vector<int>{4, 5, 6, 7}));
  const LayerPartition r1 = RandomPartition(0, 64, 8, 1), r2 = RandomPartition(0, 64, 8, 1);
  EXPECT_EQ(r1, r2);
  EXPECT_TRUE(r1.IsBalanced());
  EXPECT_NE(r1, RandomPartition(0, 64, 8, 2));
  EXPECT_THROW(RandomPartition(0, 10, 3, 1), ConfigError);
}

TEST(PartitionTest, ParsesIndependentlyWrittenCsv) {
  std::ostringstream csv;
  csv << "# provenance: external\nlayer,neuron,expert\n";
  for (int n = 5; n >= 0; --n) csv << 1 << ',' << n << ',' << (n % 2) << '\n';
  const Partition p = ParsePartition(csv.str());
  EXPECT_EQ(p.provenance, "external");
  const LayerPartition& lp = p.ForLayer(1);
  EXPECT_EQ(lp.num_experts, 2);
  EXPECT_EQ(lp.expert_of, (std::vector<int>{0, 1, 0, 1, 0, 1}));
  EXPECT_EQ(ParsePartition(SerializePartition(p)).layers, p.layers);
  EXPECT_THROW(p.ForLayer(0), ValidationError);
}

TEST(PartitionTest, RejectsBadCsv) {
  EXPECT_THROW(ParsePartition("neuron,expert\n0,0\n"), ParseError);
  EXPECT_THROW(ParsePartition("layer,neuron,expert\n0,0,0\n0,0,1\n"), ParseError);
  EXPECT_THROW(ParsePartition("layer,neuron,expert\n0,0,0\n0,2,1\n"), ValidationError);
  EXPECT_THROW(ParsePartition("layer,neuron,expert\n0,0,0\n0,1,0\n0,2,1\n"),
               ValidationError);
}

TEST(PartitionTest, PreMoeRequiresMoe) {
  EXPECT_THROW(PreMoePartition(InitModel({.vocab_size = 4, .d_model = 2, .d_ff = 4}, 1)),
               ConfigError);
  Model m = InitModel({.vocab_size = 4, .num_layers = 2, .d_model = 2, .d_ff = 6,
                       .moe_layers = {1}, .num_experts = 3, .top_k = 1},
                      1);
  const Partition p = PreMoePartition(m);
  ASSERT_EQ(p.layers.size(), 1u);
  EXPECT_EQ(p.layers[0], BlockPartition(1, 6, 3));
}

TEST(PartitionTest, ClusteringIsBalancedAndMonotone) {
  Model m = InitModel({.vocab_size = 4, .d_model = 8, .d_ff = 64}, 3);
  const ClusterResult r = ClusterPartition(m, 0, 8, 5);
  EXPECT_NO_THROW(r.partition.Validate());
  for (size_t i = 1; i < r.objective.size(); ++i) {
    EXPECT_LE(r.objective[i], r.objective[i - 1] + 1e-9);
  }
  EXPECT_EQ(ClusterPartition(m, 0, 8, 5).partition, r.partition);
}

TEST(PartitionTest, MoefyPreservesDenseOutput) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c = RandomConfig(rng, false);
    c.d_ff = 4 * std::uniform_int_distribution<int>(1, 6)(rng);
    Model m = InitModel(c, trial);
    RandomizeBiases(m, rng);
    Partition p;
    for (int l = 0; l < c.num_layers; ++l) p.layers.push_back(RandomPartition(l, c.d_ff, 4, trial));
    const MoefiedModel mo = MoefyModel(m, p);
    for (int l = 0; l < c.num_layers; ++l) {
      const Vector x = RandomVector(c.d_model, rng);
      EXPECT_LE((ExpertFormForward(mo, l, x) - FfnForward(m, l, x).output).norm(), 1e-10);
    }
    const Model back = UnmoefyModel(mo);
    for (int l = 0; l < c.num_layers; ++l) {
      EXPECT_EQ(back.layers[l].w_in, m.layers[l].w_in);
      EXPECT_EQ(back.layers[l].w_out, m.layers[l].w_out);
    }
  }
}

}  // namespace
}  // namespace modscope
