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

#ifndef MODSCOPE_SPECIALIZATION_H_
#define MODSCOPE_SPECIALIZATION_H_

#include <string>
#include <vector>

#include "json.hpp"
#include "modscope/dataset.h"
#include "modscope/predictivity.h"

namespace modscope {

// Top-k neurons of one sub-function in one layer.
struct NeuronSet {
  std::string sub_function_id;
  int layer = 0;
  int k = 0;
  std::vector<int> members;  // sorted ascending
};

// k = max(1, round-half-up(fraction * d_ff)). Throws ConfigError unless
// fraction lies in (0, 1].
int TopKSize(int d_ff, double fraction);

// The k highest-AP neurons; equal APs prefer the lower index.
NeuronSet TopKNeurons(const PredictivityTable& table, int sub_function, int layer,
                      double fraction);

// |A intersect B| / k. Throws ValidationError on mismatched layer or k.
double OverlapScore(const NeuronSet& a, const NeuronSet& b);

// Function x function mean overlap for one layer. Diagonal entries average
// over distinct sub-function pairs only; they are NaN when a function has a
// single sub-function.
struct LayerSimilarity {
  int layer = 0;
  std::vector<std::string> functions;
  Matrix overlap;
};

LayerSimilarity FunctionSimilarity(const PredictivityTable& table,
                                   const FunctionSuite& suite, int layer,
                                   double fraction);

// Per layer and function: mean over sub-functions of the best neuron AP.
struct BestPredictivity {
  std::vector<int> layers;
  std::vector<std::string> functions;
  Matrix values;  // layers x functions
};

BestPredictivity LayerBestPredictivity(const PredictivityTable& table,
                                       const FunctionSuite& suite);

struct SimilaritySummary {
  std::vector<LayerSimilarity> similarity;
  BestPredictivity best;
};

SimilaritySummary SummarizeSpecialization(const PredictivityTable& table,
                                          const FunctionSuite& suite, double fraction);

// "layer,function_a,function_b,overlap" (absent cells left empty) and
// "layer,function,best_ap".
std::string SimilarityToCsv(const SimilaritySummary& summary);
std::string BestPredictivityToCsv(const BestPredictivity& best);
// Heatmap cells and axis labels for external plotting.
nlohmann::json SpecializationPlotData(const SimilaritySummary& summary);

}  // namespace modscope

#endif  // MODSCOPE_SPECIALIZATION_H_
