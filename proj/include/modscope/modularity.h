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

#ifndef MODSCOPE_MODULARITY_H_
#define MODSCOPE_MODULARITY_H_

#include <span>
#include <string>
#include <vector>

#include "modscope/dataset.h"
#include "modscope/partition.h"
#include "modscope/predictivity.h"
#include "modscope/specialization.h"

namespace modscope {

enum class NullMode {
  // P(X >= r) with X ~ Binomial(M * K, n_E / N).
  kBinomialApprox,
  // Upper tail of the M-fold convolution of Hypergeometric(N, K, n_E).
  kExactSum,
};

// r_e = sum over sets of |set intersect members(e)|. Every set must belong to
// the partition's layer.
std::vector<int> HitCounts(std::span<const NeuronSet> sets,
                           const LayerPartition& partition);

// Inclusive upper tail P(R >= r) under the uniform-placement null, where N is
// the layer width, n_E the expert size, K the per-sub-function set size and M
// the number of sub-functions. Throws ConfigError on invalid ranges.
double NullPvalue(int r, int N, int n_E, int K, int M, NullMode mode);

struct DetectOptions {
  double fraction = 0.01;
  double alpha = 0.001;
  NullMode mode = NullMode::kBinomialApprox;

  void Validate() const;  // throws ConfigError
};

struct ExpertTest {
  int expert = 0;
  int hits = 0;  // r_i
  double p_value = 1.0;
  bool functional = false;
  // (r_i / n_E) / (M k / N)
  double degree = 0.0;
};

// Hypothesis test of every expert of one layer against one group of
// sub-functions (a function, or a single sub-function).
struct ExpertTestResult {
  int layer = 0;
  std::string group;  // function name or sub-function id
  int num_sub_functions = 0;  // M
  int k = 0;
  int num_neurons = 0;  // N
  int expert_size = 0;  // n_E
  std::vector<ExpertTest> experts;
  double prop = 0.0;    // E_f / E
  double degree = 0.0;  // mean over functional experts, 0 if none

  std::vector<int> FunctionalExperts() const;
};

// Runs the test for the table rows `sub_functions` in one layer.
ExpertTestResult TestExperts(const PredictivityTable& table,
                             const LayerPartition& partition,
                             std::span<const int> sub_functions, std::string group,
                             const DetectOptions& options);

struct FunctionalExpertReport {
  DetectOptions options;
  std::vector<ExpertTestResult> entries;  // one per (layer, function)

  const ExpertTestResult& Find(int layer, const std::string& function) const;
};

// Per layer covered by both the table and the partition, per function of the
// suite.
FunctionalExpertReport DetectFunctionalExperts(const PredictivityTable& table,
                                               const Partition& partition,
                                               const FunctionSuite& suite,
                                               const DetectOptions& options = {});

// AP of functional flags ranked by each expert's predictivity averaged over
// the function's sub-functions. `expert_ap` is sub-functions x E for the
// entry's layer; `sub_functions` selects the function's rows. Throws
// ValidationError when all experts share one flag.
double ConsistencyAp(const ExpertTestResult& entry, const Matrix& expert_ap,
                     std::span<const int> sub_functions);

// The same test with M = 1 for a single sub-function, in every partition layer.
std::vector<ExpertTestResult> DetectSubFunctionalExperts(
    const PredictivityTable& table, const Partition& partition,
    const std::string& sub_function, const DetectOptions& options = {});

// Sub-functional Prop and Degree averaged within each function.
struct SubFunctionalSummary {
  int layer = 0;
  std::string function;
  double prop = 0.0;
  double degree = 0.0;
};

std::vector<SubFunctionalSummary> SummarizeSubFunctionalExperts(
    const PredictivityTable& table, const Partition& partition,
    const FunctionSuite& suite, const DetectOptions& options = {});

// Wide table: partitioning,layer,<function>_prop,<function>_degree,... with
// one row per layer plus an "all" row averaging across layers.
std::string ReportToCsv(const FunctionalExpertReport& report,
                        const std::string& partitioning);
// Long form: layer,function,expert,hits,p_value,functional,degree.
std::string ExpertTestsToCsv(const FunctionalExpertReport& report);
std::string SubFunctionalToCsv(const std::vector<SubFunctionalSummary>& summary,
                               const std::string& partitioning);

}  // namespace modscope

#endif  // MODSCOPE_MODULARITY_H_
