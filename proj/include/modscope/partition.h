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

#ifndef MODSCOPE_PARTITION_H_
#define MODSCOPE_PARTITION_H_

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "modscope/model.h"

namespace modscope {

// Assignment of one layer's neurons to experts.
struct LayerPartition {
  int layer = 0;
  int num_experts = 0;
  std::vector<int> expert_of;  // neuron -> expert

  int d_ff() const { return static_cast<int>(expert_of.size()); }
  std::vector<std::vector<int>> Members() const;  // sorted neuron lists
  bool IsBalanced() const;
  // Coverage, ranges and balance. Throws ValidationError.
  void Validate() const;

  friend bool operator==(const LayerPartition&, const LayerPartition&) = default;
};

struct Partition {
  std::vector<LayerPartition> layers;
  std::string provenance;

  bool HasLayer(int layer) const;
  const LayerPartition& ForLayer(int layer) const;  // throws ValidationError
};

// Architectural expert ownership of every MoE layer: neuron i belongs to
// expert i / (d_ff / E). Throws ConfigError on dense-only models.
Partition PreMoePartition(const Model& model);

// Expert e owns neurons [e * d_ff/E, (e+1) * d_ff/E).
LayerPartition BlockPartition(int layer, int d_ff, int num_experts);

// Uniformly random balanced assignment. Throws ConfigError when E does not
// divide d_ff.
LayerPartition RandomPartition(int layer, int d_ff, int num_experts,
                               std::uint64_t seed);

struct ClusterOptions {
  int max_iters = 50;
};

struct ClusterResult {
  LayerPartition partition;
  // Sum of within-cluster cosine distances after each completed iteration.
  std::vector<double> objective;
  int iterations = 0;
  bool converged = false;
};

// Balanced k-means over the rows of W^I under cosine distance, with
// k-means++ seeding and capacity-constrained greedy assignment ordered by
// assignment margin. A new assignment is accepted only if it does not raise
// the objective under the current centroids, so the objective never grows.
ClusterResult ClusterPartition(const Model& model, int layer, int num_experts,
                               std::uint64_t seed, const ClusterOptions& options = {});

// A dense model whose neurons were regrouped into contiguous expert blocks.
struct MoefiedModel {
  Model model;
  int num_experts = 0;
  // Per layer: new position -> original neuron index. Identity for layers not
  // covered by the partition.
  std::vector<std::vector<int>> permutation;
};

// Permutes W^I rows, b^I and W^O columns so that expert e occupies block e.
// Parameters are moved, never changed. Throws ValidationError for unbalanced
// partitions.
MoefiedModel MoefyModel(const Model& model, const Partition& partition);

// Inverse of MoefyModel.
Model UnmoefyModel(const MoefiedModel& moefied);

// Expert-form output with every expert selected at weight 1:
// sum_e FFN_e(x), each expert restricted to its block.
Vector ExpertFormForward(const MoefiedModel& moefied, int layer, const Vector& x);

// CSV: "# provenance: ..." then "layer,neuron,expert" rows.
std::string SerializePartition(const Partition& partition);
Partition ParsePartition(std::string_view text);
void SavePartition(const Partition& partition, const std::filesystem::path& path);
Partition LoadPartition(const std::filesystem::path& path);

}  // namespace modscope

#endif  // MODSCOPE_PARTITION_H_
