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

#ifndef MODSCOPE_PREDICTIVITY_H_
#define MODSCOPE_PREDICTIVITY_H_

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "modscope/dataset.h"
#include "modscope/model.h"
#include "modscope/partition.h"

namespace modscope {

// Sequence-level activations of one layer on one sub-function's instances.
struct ActivationRecord {
  std::string sub_function_id;
  int layer = 0;
  Matrix activations;       // instances x d_ff, a_ij = max over tokens
  std::vector<int> labels;  // instance order of the dataset
};

// a_ij = max over token positions of neuron j's activation on instance i.
// Throws ValidationError when the trace count differs from the instance count.
ActivationRecord SequenceActivations(std::span<const ForwardTrace> traces,
                                     const SubFunctionDataset& dataset, int layer);

// Non-interpolated average precision sum_n (R_n - R_{n-1}) P_n over the
// ranking by descending score. Equal scores keep their original order.
// Throws ValidationError unless both labels occur.
double AveragePrecision(std::span<const double> scores, std::span<const int> labels);

struct BidirectionalAp {
  double value = 0.0;
  // All scores tied, or the value fell below 0.5 on a tiny input.
  bool degenerate = false;
};

// max(AP(scores), AP(-scores)).
BidirectionalAp BidirectionalAveragePrecision(std::span<const double> scores,
                                              std::span<const int> labels);

// Bidirectional AP per (layer, sub-function, neuron).
struct PredictivityTable {
  std::vector<int> layers;
  int d_ff = 0;
  std::vector<std::string> sub_functions;
  std::vector<Matrix> ap;  // per layer slot: sub-functions x d_ff
  int degenerate_cells = 0;

  int LayerSlot(int layer) const;               // throws ValidationError
  int SubFunctionIndex(std::string_view id) const;  // throws ValidationError
  double At(int layer, int sub_function, int neuron) const {
    return ap[LayerSlot(layer)](sub_function, neuron);
  }
  // The d_ff predictivities of one sub-function in one layer.
  Vector Row(int layer, int sub_function) const {
    return ap[LayerSlot(layer)].row(sub_function).transpose();
  }
};

struct TableOptions {
  int threads = 0;  // 0 = DefaultThreadCount()
  ForwardOptions forward;
};

// Runs the encoder on every instance and fills the table for `layers`.
// Deterministic regardless of thread count.
PredictivityTable BuildTable(const Model& model, const FunctionSuite& suite,
                             std::span<const int> layers,
                             const TableOptions& options = {});

// Table from precomputed activation records (e.g. exported from another
// framework). Records must cover every (sub-function, layer) pair of `suite`
// order and `layers`.
PredictivityTable BuildTableFromRecords(std::span<const ActivationRecord> records,
                                        std::span<const std::string> sub_functions,
                                        std::span<const int> layers);

// Expert predictivity: mean member-neuron AP per (layer, sub-function).
struct ExpertTable {
  std::vector<int> layers;
  std::vector<int> num_experts;  // per layer slot
  std::vector<std::string> sub_functions;
  std::vector<Matrix> ap;  // per layer slot: sub-functions x E

  int LayerSlot(int layer) const;
  Vector Row(int layer, int sub_function) const {
    return ap[LayerSlot(layer)].row(sub_function).transpose();
  }
};

// Throws ValidationError when the partition misses a table layer or its size
// differs from d_ff.
ExpertTable ExpertPredictivity(const PredictivityTable& table,
                               const Partition& partition);

// Expert predictivities of one layer under one layer partition.
Matrix ExpertPredictivityForLayer(const PredictivityTable& table,
                                  const LayerPartition& partition);

// "layer,neuron,sub_function,ap" with 17 significant digits.
std::string TableToCsv(const PredictivityTable& table);
std::string ExpertTableToCsv(const ExpertTable& table);

// Compact binary cache ("MSPT"): JSON header plus row-major float64 values.
std::string EncodeTable(const PredictivityTable& table);
PredictivityTable DecodeTable(std::string_view bytes);

// Activation record file ("MSAR"), little-endian:
//   magic, u32 version, u64 header length, JSON header
//   {"sub_function", "layer", "rows", "cols"}, int32 labels[rows],
//   float32 activations[rows x cols] row-major.
std::string EncodeActivationRecord(const ActivationRecord& record);
ActivationRecord DecodeActivationRecord(std::string_view bytes);
void SaveActivationRecord(const ActivationRecord& record,
                          const std::filesystem::path& path);
ActivationRecord LoadActivationRecord(const std::filesystem::path& path);

}  // namespace modscope

#endif  // MODSCOPE_PREDICTIVITY_H_
