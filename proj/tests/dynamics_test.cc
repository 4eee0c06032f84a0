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


#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "modscope/checkpoint.h"
#include "modscope/dataset.h"
#include "modscope/dynamics.h"
#include "modscope/errors.h"
#include "modscope/modularity.h"
#include "modscope/partition.h"
#include "modscope/predictivity.h"
#include "support.h"

namespace modscope {
namespace {

FunctionSuite SuiteOf(const std::vector<std::pair<std::string, std::string>>& ids) {
  FunctionSuite s;
  for (const auto& [id, f] : ids) s.sub_functions.push_back({.id = id, .function = f});
  return s;
}

PredictivityTable RandomTable(int d_ff, const FunctionSuite& suite, std::mt19937_64& rng) {
  PredictivityTable t;
  t.layers = {0};
  t.d_ff = d_ff;
  for (const auto& sf : suite.sub_functions) t.sub_functions.push_back(sf.id);
  Matrix ap(static_cast<Eigen::Index>(suite.sub_functions.size()), d_ff);
  std::uniform_real_distribution<double> u(0.5, 1.0);
  for (Eigen::Index i = 0; i < ap.size(); ++i) ap.data()[i] = u(rng);
  t.ap = {ap};
  return t;
}

double Find(const std::vector<StabilizationPoint>& curve, std::int64_t step,
            const std::string& function, const std::string& level) {
  for (const auto& p : curve) {
    if (p.step == step && p.function == function && p.level == level) return p.value;
  }
  ADD_FAILURE() << "missing point";
  return NAN;
}

TEST(SpearmanTest, MatchesCountingOracle) {
  std::mt19937_64 rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = std::uniform_int_distribution<int>(3, 30)(rng);
    std::vector<double> x(n), y(n);
    for (int i = 0; i < n; ++i) {
      x[i] = std::uniform_int_distribution<int>(0, 5)(rng);
      y[i] = std::uniform_int_distribution<int>(0, 5)(rng);
    }
    x[0] = -1;
    y[1] = -1;
    EXPECT_NEAR(Spearman(x, y), testing::SpearmanOracle(x, y), 1e-12);
  }
}

TEST(SpearmanTest, RanksAndInvariance) {
  const std::vector<double> v{10, 20, 20, 30};
  EXPECT_EQ(AverageRanks(v), (std::vector<double>{1, 2.5, 2.5, 4}));
  std::mt19937_64 rng(62);
  std::vector<double> x(50), y(50), fx(50);
  for (int i = 0; i < 50; ++i) {
    x[i] = std::normal_distribution<double>()(rng);
    y[i] = x[i] + std::normal_distribution<double>()(rng);
    fx[i] = std::exp(3 * x[i]) + 7;
  }
  EXPECT_NEAR(Spearman(fx, y), Spearman(x, y), 1e-12);
  EXPECT_NEAR(Spearman(x, y), Spearman(y, x), 1e-12);
  EXPECT_NEAR(Spearman(x, x), 1.0, 1e-12);
  const std::vector<double> flat(50, 1.0);
  EXPECT_THROW(Spearman(flat, y), ComputeError);
  EXPECT_THROW(Spearman(std::span(x).first(3), y), ValidationError);
}

TEST(StabilizationTest, DuplicateCheckpointScoresOne) {
  std::mt19937_64 rng(63);
  const FunctionSuite suite = SuiteOf({{"a", "F"}, {"b", "F"}, {"c", "G"}});
  const PredictivityTable t = RandomTable(64, suite, rng);
  const SeriesTables series{{0, 10}, {t, t}};
  const auto neuron = StabilizationCurve(series, suite, Level::kNeuron, nullptr);
  EXPECT_DOUBLE_EQ(Find(neuron, 10, "all", "neuron"), 1.0);
  EXPECT_DOUBLE_EQ(Find(neuron, 10, "F", "neuron"), 1.0);
  Partition p;
  p.layers.push_back(BlockPartition(0, 64, 8));
  const auto expert = StabilizationCurve(series, suite, Level::kExpert, &p,
                                         {.baseline_draws = 20, .seed = 1});
  EXPECT_DOUBLE_EQ(Find(expert, 10, "all", "expert"), 1.0);
  EXPECT_DOUBLE_EQ(Find(expert, 10, "all", "expert_random"), 1.0);
}

TEST(StabilizationTest, IndependentCheckpointsScoreNearZero) {
  std::mt19937_64 rng(64);
  const FunctionSuite suite = SuiteOf({{"a", "F"}, {"b", "F"}});
  const SeriesTables series{{0, 1}, {RandomTable(4096, suite, rng), RandomTable(4096, suite, rng)}};
  const auto curve = StabilizationCurve(series, suite, Level::kNeuron, nullptr);
  // Each correlation has standard deviation about 1 / sqrt(4096).
  EXPECT_LT(std::abs(Find(curve, 1, "all", "neuron")), 4.0 / 64);
}

TEST(StabilizationTest, SymmetricInTheAdjacentPair) {
  std::mt19937_64 rng(65);
  const FunctionSuite suite = SuiteOf({{"a", "F"}, {"b", "G"}});
  const PredictivityTable t0 = RandomTable(32, suite, rng), t1 = RandomTable(32, suite, rng);
  const auto fwd = StabilizationCurve({{0, 5}, {t0, t1}}, suite, Level::kNeuron, nullptr);
  const auto rev = StabilizationCurve({{0, 5}, {t1, t0}}, suite, Level::kNeuron, nullptr);
  ASSERT_EQ(fwd.size(), rev.size());
  for (size_t i = 0; i < fwd.size(); ++i) EXPECT_DOUBLE_EQ(fwd[i].value, rev[i].value);
}

TEST(StabilizationTest, ConstantVectorsAreSkipped) {
  std::mt19937_64 rng(66);
  const FunctionSuite suite = SuiteOf({{"a", "F"}, {"b", "F"}});
  PredictivityTable t0 = RandomTable(16, suite, rng);
  PredictivityTable t1 = t0;
  t0.ap[0].row(1).setConstant(0.5);
  const auto curve = StabilizationCurve({{0, 1}, {t0, t1}}, suite, Level::kNeuron, nullptr);
  for (const auto& p : curve) {
    if (p.function == "all") {
      EXPECT_EQ(p.skipped, 1);
      EXPECT_DOUBLE_EQ(p.value, 1.0);
      EXPECT_EQ(p.vector_length, 16);
    }
  }
}

TEST(StabilizationTest, FirstReachFraction) {
  const std::vector<StabilizationPoint> curve{{.step = 10, .function = "all", .level = "neuron", .value = 0.5},
                                              {.step = 20, .function = "all", .level = "neuron", .value = 0.95},
                                              {.step = 30, .function = "all", .level = "neuron", .value = 0.85},
                                              {.step = 40, .function = "all", .level = "neuron", .value = 0.99}};
  EXPECT_DOUBLE_EQ(FirstReachFraction(curve, "all", "neuron", 0.9), 0.5);
  EXPECT_TRUE(std::isnan(FirstReachFraction(curve, "all", "expert", 0.9)));
}

TEST(EmergenceTest, GivenPartitionMatchesDetection) {
  std::mt19937_64 rng(67);
  const FunctionSuite suite = SuiteOf({{"a", "F"}, {"b", "F"}, {"c", "G"}});
  PredictivityTable t = RandomTable(128, suite, rng);
  t.ap[0].block(0, 0, 2, 4).setConstant(1.0);  // F concentrated in expert 0
  const SeriesTables series{{0, 3}, {RandomTable(128, suite, rng), t}};
  Partition p;
  p.layers.push_back(BlockPartition(0, 128, 8));
  const DetectOptions detect{.fraction = 0.03};
  const auto curve = EmergenceCurve(series, suite, p, {.detect = detect, .random_draws = 10});
  const auto report = DetectFunctionalExperts(t, p, suite, detect);
  int checked = 0;
  for (const auto& q : curve) {
    if (q.step != 3 || q.partitioning != "given") continue;
    const auto& entry = report.Find(0, q.function);
    EXPECT_DOUBLE_EQ(q.prop, entry.prop);
    EXPECT_DOUBLE_EQ(q.degree, entry.degree);
    ++checked;
  }
  EXPECT_GE(checked, 2);
  EXPECT_GT(report.Find(0, "F").prop, 0.0);
}

TEST(ClusteringTest, OverlapMatchesOracle) {
  std::mt19937_64 rng(68);
  Matrix ap(5, 6);
  for (Eigen::Index i = 0; i < ap.size(); ++i) {
    ap.data()[i] = std::uniform_int_distribution<int>(0, 3)(rng);
  }
  for (int k = 1; k <= 6; ++k) {
    std::vector<std::vector<int>> top(5);
    for (int i = 0; i < 5; ++i) {
      std::vector<std::pair<double, int>> keyed;
      for (int e = 0; e < 6; ++e) keyed.push_back({-ap(i, e), e});
      std::sort(keyed.begin(), keyed.end());
      for (int t = 0; t < k; ++t) top[i].push_back(keyed[t].second);
      std::sort(top[i].begin(), top[i].end());
    }
    const Matrix o = ExpertOverlapTopK(ap, k);
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 5; ++j) {
        std::vector<int> common;
        std::set_intersection(top[i].begin(), top[i].end(), top[j].begin(), top[j].end(),
                              std::back_inserter(common));
        EXPECT_EQ(o(i, j), static_cast<double>(common.size()));
      }
    }
  }
  EXPECT_THROW(ExpertOverlapTopK(ap, 7), ConfigError);
}

TEST(ClusteringTest, ScoreExcludesDiagonalAndSkipsConstantRows) {
  Matrix s(3, 3);
  s << 1, 0.9, 0.1, 0.9, 1, 0.2, 0.1, 0.2, 1;
  Matrix o(3, 3);
  o << 5, 2, 0, 2, 5, 1, 0, 1, 5;
  const Matrix overlaps[] = {o};
  const ClusteringScore score = ComputeClusteringScore(s, overlaps);
  EXPECT_EQ(score.terms, 3);
  EXPECT_EQ(score.skipped, 0);
  // Row 2 pairs (0.1, 0) with (0.2, 1): rho = 1. Rows 0 and 1 likewise.
  EXPECT_DOUBLE_EQ(score.value, 1.0);
  Matrix flat = o;
  flat.row(0) << 5, 1, 1;
  const Matrix flat_overlaps[] = {flat};
  const ClusteringScore partial = ComputeClusteringScore(s, flat_overlaps);
  EXPECT_EQ(partial.skipped, 1);
  EXPECT_EQ(partial.terms, 2);
}

TEST(ClusteringTest, ParsesSimilarityInRequestedOrder) {
  const std::vector<std::string> order{"b", "a"};
  const Matrix s = ParseSimilarity("id,a,b\na,1,0.3\nb,0.3,1\n", order);
  EXPECT_EQ(s(0, 1), 0.3);
  EXPECT_EQ(s(0, 0), 1.0);
  EXPECT_THROW(ParseSimilarity("id,a,b\na,1,0.3\nb,0.4,1\n", order), ValidationError);
  EXPECT_THROW(ParseSimilarity("id,a,b\na,1,x\nb,0.3,1\n", order), ParseError);
  const std::vector<std::string> missing{"c"};
  EXPECT_THROW(ParseSimilarity("id,a,b\na,1,0.3\nb,0.3,1\n", missing), ValidationError);
}

TEST(SeriesTest, ScanOrdersByStep) {
  const auto dir = std::filesystem::temp_directory_path() / "modscope_series_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const Model m = InitModel({.vocab_size = 4, .d_model = 2, .d_ff = 4}, 1);
  SaveCheckpoint(m, dir / "z.ckpt", {.step = 5});
  SaveCheckpoint(m, dir / "a.ckpt", {.step = 50});
  SaveCheckpoint(m, dir / "m.ckpt", {.step = 0});
  const CheckpointSeries s = ScanSeries(dir);
  ASSERT_EQ(s.entries.size(), 3u);
  EXPECT_EQ(s.entries[0].step, 0);
  EXPECT_EQ(s.entries[2].path.filename(), "a.ckpt");
  SaveCheckpoint(m, dir / "dup.ckpt", {.step = 5});
  EXPECT_THROW(ScanSeries(dir), ValidationError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(ScanSeries(dir), IoError);
}

}  // namespace
}  // namespace modscope
