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
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "modscope/checkpoint.h"
#include "modscope/dynamics.h"
#include "modscope/errors.h"
#include "modscope/model.h"
#include "modscope/trainer.h"

namespace modscope {
namespace {

// Tokens 1..6 only; 7 is unused and 8 is the mask.
std::vector<std::vector<int>> Corpus(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> corpus;
  for (int i = 0; i < n; ++i) {
    const int base = std::uniform_int_distribution<int>(0, 1)(rng) * 3;
    std::vector<int> seq;
    for (int t = 0; t < 6; ++t) seq.push_back(1 + base + std::uniform_int_distribution<int>(0, 2)(rng));
    corpus.push_back(seq);
  }
  return corpus;
}

ModelConfig Dense() {
  return {.vocab_size = 9, .d_model = 8, .d_ff = 16, .mixing = Mixing::kAttention,
          .num_heads = 2};
}

ModelConfig Moe() {
  ModelConfig c = Dense();
  c.moe_layers = {0};
  c.num_experts = 4;
  c.top_k = 1;
  return c;
}

TEST(TrainerTest, ZeroStepsReturnsTheInitialModel) {
  const Model init = InitModel(Dense(), 1);
  int calls = 0;
  const TrainResult r = Train(init, Corpus(10, 1), {.steps = 0},
                              [&](std::int64_t step, const Model&) {
                                EXPECT_EQ(step, 0);
                                ++calls;
                              });
  EXPECT_EQ(calls, 1);
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(r.model.embedding, init.embedding);
  EXPECT_EQ(r.model.layers[0].w_in, init.layers[0].w_in);
}

TEST(TrainerTest, DeterministicAcrossRunsAndThreads) {
  const auto corpus = Corpus(40, 2);
  TrainConfig c{.steps = 15, .batch_size = 4, .seed = 3, .threads = 1};
  const TrainResult a = Train(InitModel(Moe(), 4), corpus, c, nullptr);
  c.threads = 4;
  const TrainResult b = Train(InitModel(Moe(), 4), corpus, c, nullptr);
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(a.model.layers[0].w_in, b.model.layers[0].w_in);
  EXPECT_EQ(a.model.lm_head, b.model.lm_head);
}

TEST(TrainerTest, LossDecreases) {
  const TrainResult r = Train(InitModel(Dense(), 5), Corpus(200, 5),
                              {.steps = 300, .batch_size = 8, .learning_rate = 1e-2,
                               .checkpoint_every = 100, .seed = 5},
                              nullptr);
  double head = 0, tail = 0;
  for (int i = 0; i < 30; ++i) {
    head += r.log[i].second;
    tail += r.log[r.log.size() - 1 - i].second;
  }
  EXPECT_LT(tail, 0.8 * head);
  EXPECT_EQ(r.checkpoint_steps, (std::vector<std::int64_t>{0, 100, 200, 300}));
}

TEST(TrainerTest, DivergenceAborts) {
  try {
    Train(InitModel(Dense(), 6), Corpus(20, 6),
          {.steps = 50, .batch_size = 4, .learning_rate = 1e200}, nullptr);
    FAIL() << "expected divergence";
  } catch (const ComputeError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at step"), std::string::npos);
  }
}

TEST(TrainerTest, UnroutedExpertsAreNotUpdated) {
  const Model init = InitModel(Moe(), 7);
  const TrainResult r = Train(init, Corpus(20, 7), {.steps = 1, .batch_size = 1, .seed = 1},
                              nullptr);
  ASSERT_EQ(r.routed.size(), 1u);
  const int n_e = Moe().d_ff / Moe().num_experts;
  int untouched = 0, changed = 0;
  for (int e = 0; e < 4; ++e) {
    const auto rows = Eigen::seqN(e * n_e, n_e);
    const bool same = r.model.layers[0].w_in(rows, Eigen::all) == init.layers[0].w_in(rows, Eigen::all) &&
                      r.model.layers[0].w_out(Eigen::all, rows) == init.layers[0].w_out(Eigen::all, rows);
    if (!r.routed[0][0][e]) {
      EXPECT_TRUE(same) << "expert " << e;
      ++untouched;
    } else {
      // A routed expert whose neurons never fire gets a zero gradient.
      changed += !same;
    }
  }
  EXPECT_GT(untouched, 0);
  EXPECT_GT(changed, 0);
}

TEST(TrainerTest, UnseenTokenEmbeddingsStayPut) {
  const Model init = InitModel(Dense(), 8);
  const TrainResult r = Train(init, Corpus(30, 8), {.steps = 20, .batch_size = 4}, nullptr);
  EXPECT_EQ(r.model.embedding.row(7), init.embedding.row(7));
  EXPECT_EQ(r.model.embedding.row(0), init.embedding.row(0));
  EXPECT_NE(r.model.embedding.row(1), init.embedding.row(1));
}

TEST(TrainerTest, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(9);
  for (const ModelConfig& c : {Dense(), Moe()}) {
    ModelConfig cfg = c;
    cfg.use_bias = true;
    const Model m = InitModel(cfg, 10);
    std::vector<MaskedSequence> batch;
    for (const auto& seq : Corpus(3, 9)) batch.push_back(MaskSequence(seq, 0.3, 8, rng));
    const GradCheckResult g = GradCheck(m, batch);
    EXPECT_GT(g.checked, 100);
    EXPECT_LT(g.max_relative_error, 1e-4);
  }
}

TEST(TrainerTest, MaskingAndValidation) {
  std::mt19937_64 rng(10);
  const std::vector<int> seq{1, 2, 3, 4, 5};
  const MaskedSequence m = MaskSequence(seq, 0.01, 8, rng);
  ASSERT_FALSE(m.positions.empty());
  for (size_t i = 0; i < m.positions.size(); ++i) {
    EXPECT_EQ(m.tokens[m.positions[i]], 8);
    EXPECT_EQ(m.targets[i], seq[m.positions[i]]);
  }
  EXPECT_THROW((TrainConfig{.steps = -1}.Validate()), ConfigError);
  EXPECT_THROW((TrainConfig{.learning_rate = 0}.Validate()), ConfigError);
  EXPECT_THROW((TrainConfig{.mask_probability = 1.0}.Validate()), ConfigError);
  EXPECT_THROW((TrainConfig{.final_lr_fraction = 0}.Validate()), ConfigError);
  EXPECT_THROW(Train(InitModel(Dense(), 1), {{1, 9}}, {}, nullptr), ValidationError);
}

TEST(TrainerTest, DirectoryOutputFormsASeries) {
  const auto dir = std::filesystem::temp_directory_path() / "modscope_train_test";
  std::filesystem::remove_all(dir);
  CheckpointSeries written;
  TrainToDirectory(InitModel(Dense(), 11), Corpus(20, 11),
                   {.steps = 7, .batch_size = 2, .checkpoint_every = 3}, dir, &written);
  const CheckpointSeries scanned = ScanSeries(dir);
  ASSERT_EQ(scanned.entries.size(), 4u);
  for (size_t i = 0; i < 4; ++i) EXPECT_EQ(scanned.entries[i].step, written.entries[i].step);
  EXPECT_EQ(scanned.entries.back().step, 7);
  EXPECT_TRUE(std::filesystem::exists(dir / "train_log.csv"));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace modscope
