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

#ifndef MODSCOPE_PERTURBATION_H_
#define MODSCOPE_PERTURBATION_H_

#include <cstdint>
#include <filesystem>
#include <map>
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

enum class PerturbationMode { kNoise, kRouteRestrict };
enum class RankingBasis { kSingleDataset, kSumOverSeen, kRandom, kExpertSum };
enum class Granularity { kNeuron, kExpert };

struct PerturbationPlan {
  PerturbationMode mode = PerturbationMode::kNoise;
  // Noise mode: layer -> neurons. Route-restrict mode: layer -> allowed experts.
  std::map<int, std::vector<int>> targets;
  double noise_variance = 4.0;
  std::vector<int> layers;
  RankingBasis ranking_basis = RankingBasis::kSumOverSeen;

  // Checks the invariants, and target ranges when a config is given.
  void Validate(const ModelConfig* config = nullptr) const;
};

nlohmann::json PlanToJson(const PerturbationPlan& plan);
PerturbationPlan PlanFromJson(const nlohmann::json& json);  // throws ConfigError
PerturbationPlan LoadPlan(const std::filesystem::path& path);

// Targets of one layer ordered by the summed predictivity over `seen`,
// descending, ties to the lower index. Expert granularity ranks experts by the
// sum of their mean neuron predictivity and needs a partition.
std::vector<int> RankTargets(const PredictivityTable& table, int layer,
                             std::span<const std::string> seen, Granularity granularity,
                             const LayerPartition* partition = nullptr);

// Number of targets perturbed for a proportion p of n: floor(p * n + 0.5).
int TargetCount(double proportion, int n);

// Noise plan perturbing `proportion` of each layer in `layers`.
// kSumOverSeen and kSingleDataset rank neurons, kExpertSum ranks experts of
// `partition` and targets all their neurons, kRandom draws neurons uniformly.
// With a partition, kRandom draws as many neurons as the expert condition
// would cover so the two stay count-matched.
PerturbationPlan BuildNoisePlan(const PredictivityTable& table,
                                std::span<const std::string> seen,
                                const Partition* partition, std::span<const int> layers,
                                double proportion, RankingBasis basis,
                                std::uint64_t seed, double noise_variance = 4.0);

// Forward pass adding N(0, variance) to every targeted post-activation value
// before the output projection, independently per token.
ForwardTrace NoiseForward(const Model& model, const PerturbationPlan& plan,
                          std::span<const int> tokens, std::uint64_t seed);

// Copy of the model whose routers only consider the allowed experts.
Model RestrictRouting(const Model& model,
                      const std::map<int, std::vector<int>>& allow_lists);

// Allowed experts of one layer: the functional experts of `entry` when
// keep_functional is set, otherwise every other expert.
std::vector<int> AllowList(const ExpertTestResult& entry, int num_experts,
                           bool keep_functional);

// Frozen logistic probe on max-pooled final hidden states.
struct Readout {
  Vector mean;
  Vector scale;
  Vector weights;
  double bias = 0.0;

  int Predict(const Vector& pooled) const;
};

struct ReadoutOptions {
  int iterations = 400;
  double learning_rate = 0.5;
  double l2 = 1e-3;
};

Vector PooledFeatures(const ForwardTrace& trace);
Readout TrainReadout(const Model& model, const SubFunctionDataset& dataset,
                     const ReadoutOptions& options = {});

// Mean 0/1 correctness. Stochastic plans draw instance i's noise from a seed
// derived from (seed, i), so the result does not depend on evaluation order.
double EvaluateAccuracy(const Model& model, const SubFunctionDataset& dataset,
                        const Readout& readout, const PerturbationPlan* plan = nullptr,
                        std::uint64_t seed = 0, int threads = 0);

// Averages EvaluateAccuracy over `runs` noise seeds derived from `seed`.
double MeanPerturbedAccuracy(const Model& model, const SubFunctionDataset& dataset,
                             const Readout& readout, const PerturbationPlan& plan,
                             std::uint64_t seed, int runs = 5, int threads = 0);

struct PerturbationResult {
  std::string condition;
  double proportion = 0.0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

std::string ResultsToCsv(std::span<const PerturbationResult> results);

std::string_view ModeName(PerturbationMode mode);
std::string_view BasisName(RankingBasis basis);

}  // namespace modscope

#endif  // MODSCOPE_PERTURBATION_H_
