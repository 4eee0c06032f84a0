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

#ifndef MODSCOPE_DYNAMICS_H_
#define MODSCOPE_DYNAMICS_H_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "modscope/dataset.h"
#include "modscope/model.h"
#include "modscope/modularity.h"
#include "modscope/partition.h"
#include "modscope/predictivity.h"

namespace modscope {

// Mean ranks, 1-based; tied values share the average of their positions.
std::vector<double> AverageRanks(std::span<const double> values);

// Pearson correlation of average ranks. Throws ValidationError on length
// mismatch or fewer than two values, ComputeError when either side is
// constant.
double Spearman(std::span<const double> x, std::span<const double> y);

struct SeriesEntry {
  std::int64_t step = 0;
  std::filesystem::path path;
};

struct CheckpointSeries {
  std::vector<SeriesEntry> entries;
  void Validate() const;  // strictly increasing steps
};

// Every *.ckpt file in `dir`, ordered by the step stored in its header.
CheckpointSeries ScanSeries(const std::filesystem::path& dir);

// Predictivity tables of a checkpoint series over the same suite and layers.
struct SeriesTables {
  std::vector<std::int64_t> steps;
  std::vector<PredictivityTable> tables;
};

// Loads each checkpoint in turn. Throws ValidationError when configs differ.
SeriesTables BuildSeriesTables(const CheckpointSeries& series, const FunctionSuite& suite,
                               std::span<const int> layers,
                               const TableOptions& options = {});
SeriesTables BuildSeriesTables(std::span<const Model> models,
                               std::span<const std::int64_t> steps,
                               const FunctionSuite& suite, std::span<const int> layers,
                               const TableOptions& options = {});

enum class Level { kNeuron, kExpert };
std::string_view LevelName(Level level);

struct StabilizationPoint {
  std::int64_t step = 0;  // later checkpoint of the adjacent pair
  std::string function;   // "all" aggregates every sub-function
  std::string level;      // neuron, expert or expert_random
  double value = 0.0;
  double stderr_value = 0.0;
  int vector_length = 0;
  int skipped = 0;  // constant predictivity vectors left out of the mean
};

struct StabilizationOptions {
  int baseline_draws = 1000;
  std::uint64_t seed = 0;
};

// Mean Spearman correlation between adjacent checkpoints over the sub-functions
// of each function and all layers. Expert level needs a partition and adds a
// random-partition baseline averaged over options.baseline_draws draws.
std::vector<StabilizationPoint> StabilizationCurve(const SeriesTables& series,
                                                   const FunctionSuite& suite, Level level,
                                                   const Partition* partition,
                                                   const StabilizationOptions& options = {});

// Step fraction (step / last step) at which a curve first reaches `threshold`,
// or NaN when it never does.
double FirstReachFraction(std::span<const StabilizationPoint> curve,
                          std::string_view function, std::string_view level,
                          double threshold);

struct EmergencePoint {
  std::int64_t step = 0;
  int layer = -1;  // -1 averages over layers
  std::string function;
  std::string partitioning;  // "given" or "random"
  double prop = 0.0;
  double degree = 0.0;
  double prop_stderr = 0.0;
  double degree_stderr = 0.0;
};

struct EmergenceOptions {
  DetectOptions detect;
  int random_draws = 1000;
  std::uint64_t seed = 0;
};

// Functional-expert detection at every checkpoint under `partition`, plus a
// random-partition reference at the last checkpoint.
std::vector<EmergencePoint> EmergenceCurve(const SeriesTables& series,
                                           const FunctionSuite& suite,
                                           const Partition& partition,
                                           const EmergenceOptions& options = {});

// O(k)[i][j] = size of the intersection of the top-k experts of rows i and j.
// Rows of expert_ap are sub-functions. Ties go to the lower expert index.
Matrix ExpertOverlapTopK(const Matrix& expert_ap, int k);

struct ClusteringScore {
  double value = 0.0;
  int terms = 0;
  int skipped = 0;  // (i, k) pairs with a constant row after exclusion
};

// Mean over k and i of Spearman(S[i, :], O(k)[i, :]).
ClusteringScore ComputeClusteringScore(const Matrix& similarity,
                                       std::span<const Matrix> overlaps,
                                       bool exclude_self = true);

struct LayerClusteringScore {
  int layer = 0;
  ClusteringScore score;
};

struct ClusteringReport {
  std::vector<LayerClusteringScore> layers;
  double global_mean = 0.0;  // mean over layers with at least one term
};

ClusteringReport ClusteringScoreByLayer(const ExpertTable& experts,
                                        const Matrix& similarity, int max_k,
                                        bool exclude_self = true);

// Square CSV: header "sub_function,<id>,...", then one row per id. Rows are
// reordered to `order`. Throws ValidationError unless symmetric and finite.
Matrix ParseSimilarity(std::string_view text, std::span<const std::string> order);
Matrix LoadSimilarity(const std::filesystem::path& path,
                      std::span<const std::string> order);

std::string StabilizationToCsv(std::span<const StabilizationPoint> points);
std::string EmergenceToCsv(std::span<const EmergencePoint> points);
std::string ClusteringToCsv(const ClusteringReport& report);
nlohmann::json DynamicsPlotData(std::span<const StabilizationPoint> stabilization,
                                std::span<const EmergencePoint> emergence);

}  // namespace modscope

#endif  // MODSCOPE_DYNAMICS_H_
