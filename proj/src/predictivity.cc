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

#include "modscope/predictivity.h"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "binary_io.h"
#include "modscope/checkpoint.h"
#include "modscope/errors.h"
#include "modscope/parallel.h"

namespace modscope {
namespace {

using internal::AppendPod;
using internal::ReadPod;

constexpr char kTableMagic[5] = "MSPT";
constexpr char kRecordMagic[5] = "MSAR";
constexpr std::uint32_t kFormatVersion = 1;

std::string FormatDouble(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double ColumnAp(const Matrix& activations, int column, std::span<const int> labels,
                int* degenerate) {
  std::vector<double> scores(activations.rows());
  for (Eigen::Index i = 0; i < activations.rows(); ++i) scores[i] = activations(i, column);
  const BidirectionalAp ap = BidirectionalAveragePrecision(scores, labels);
  if (ap.degenerate) ++*degenerate;
  return ap.value;
}

// Fills row `sub` of every layer slot from one record per layer.
void FillFromRecord(const ActivationRecord& record, int slot, int sub,
                    PredictivityTable& table, int* degenerate) {
  if (record.activations.cols() != table.d_ff) {
    throw ValidationError("activation record for '" + record.sub_function_id +
                          "' has " + std::to_string(record.activations.cols()) +
                          " neurons, expected " + std::to_string(table.d_ff));
  }
  for (int j = 0; j < table.d_ff; ++j) {
    table.ap[slot](sub, j) = ColumnAp(record.activations, j, record.labels, degenerate);
  }
}

}  // namespace

ActivationRecord SequenceActivations(std::span<const ForwardTrace> traces,
                                     const SubFunctionDataset& dataset, int layer) {
  if (traces.size() != dataset.instances.size()) {
    throw ValidationError("sub-function '" + dataset.id + "' has " +
                          std::to_string(dataset.instances.size()) +
                          " instances but " + std::to_string(traces.size()) +
                          " traces");
  }
  ActivationRecord record;
  record.sub_function_id = dataset.id;
  record.layer = layer;
  record.labels.reserve(traces.size());
  for (size_t i = 0; i < traces.size(); ++i) {
    const auto& layers = traces[i].neuron_activations;
    if (layer < 0 || layer >= static_cast<int>(layers.size())) {
      throw ValidationError("trace lacks layer " + std::to_string(layer));
    }
    const Matrix& tokens = layers[layer];
    if (i == 0) record.activations.resize(traces.size(), tokens.cols());
    record.activations.row(i) = tokens.colwise().maxCoeff();
    record.labels.push_back(dataset.instances[i].label);
  }
  return record;
}

double AveragePrecision(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ValidationError("scores and labels differ in length");
  }
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  const auto negatives = std::count(labels.begin(), labels.end(), 0);
  if (positives + negatives != static_cast<long>(labels.size())) {
    throw ValidationError("labels must be 0 or 1");
  }
  if (positives == 0 || negatives == 0) {
    throw ValidationError("average precision needs both classes");
  }
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  // Recall rises by 1/P exactly at each positive.
  double ap = 0.0;
  long hits = 0;
  for (size_t rank = 0; rank < order.size(); ++rank) {
    if (labels[order[rank]] == 1) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
  }
  return ap / static_cast<double>(positives);
}

BidirectionalAp BidirectionalAveragePrecision(std::span<const double> scores,
                                              std::span<const int> labels) {
  std::vector<double> negated(scores.size());
  std::transform(scores.begin(), scores.end(), negated.begin(),
                 [](double s) { return -s; });
  BidirectionalAp result;
  result.value = std::max(AveragePrecision(scores, labels),
                          AveragePrecision(negated, labels));
  const bool all_tied =
      std::adjacent_find(scores.begin(), scores.end(), std::not_equal_to<>()) ==
      scores.end();
  result.degenerate = all_tied || result.value < 0.5;
  return result;
}

int PredictivityTable::LayerSlot(int layer) const {
  const auto it = std::find(layers.begin(), layers.end(), layer);
  if (it == layers.end()) {
    throw ValidationError("predictivity table lacks layer " + std::to_string(layer));
  }
  return static_cast<int>(it - layers.begin());
}

int PredictivityTable::SubFunctionIndex(std::string_view id) const {
  const auto it = std::find(sub_functions.begin(), sub_functions.end(), id);
  if (it == sub_functions.end()) {
    throw ValidationError("predictivity table lacks sub-function '" +
                          std::string(id) + "'");
  }
  return static_cast<int>(it - sub_functions.begin());
}

PredictivityTable BuildTable(const Model& model, const FunctionSuite& suite,
                             std::span<const int> layers, const TableOptions& options) {
  suite.Validate();
  PredictivityTable table;
  table.layers.assign(layers.begin(), layers.end());
  table.d_ff = model.config.d_ff;
  for (int layer : table.layers) {
    if (layer < 0 || layer >= model.config.num_layers) {
      throw ConfigError("layer " + std::to_string(layer) + " out of range");
    }
  }
  const int num_subs = static_cast<int>(suite.sub_functions.size());
  for (const auto& sf : suite.sub_functions) table.sub_functions.push_back(sf.id);
  table.ap.assign(table.layers.size(), Matrix::Zero(num_subs, table.d_ff));

  std::vector<int> degenerate(num_subs, 0);
  ParallelFor(
      num_subs,
      [&](int s) {
        const SubFunctionDataset& dataset = suite.sub_functions[s];
        std::vector<ForwardTrace> traces;
        traces.reserve(dataset.instances.size());
        for (const Instance& inst : dataset.instances) {
          traces.push_back(EncoderForward(model, inst.tokens, options.forward));
        }
        for (size_t slot = 0; slot < table.layers.size(); ++slot) {
          const ActivationRecord record =
              SequenceActivations(traces, dataset, table.layers[slot]);
          FillFromRecord(record, static_cast<int>(slot), s, table, &degenerate[s]);
        }
      },
      options.threads);
  table.degenerate_cells = std::accumulate(degenerate.begin(), degenerate.end(), 0);
  return table;
}

PredictivityTable BuildTableFromRecords(std::span<const ActivationRecord> records,
                                        std::span<const std::string> sub_functions,
                                        std::span<const int> layers) {
  PredictivityTable table;
  table.layers.assign(layers.begin(), layers.end());
  table.sub_functions.assign(sub_functions.begin(), sub_functions.end());
  if (records.empty()) throw ValidationError("no activation records");
  table.d_ff = static_cast<int>(records.front().activations.cols());
  table.ap.assign(table.layers.size(),
                  Matrix::Constant(static_cast<Eigen::Index>(sub_functions.size()),
                                   table.d_ff, -1.0));
  std::vector<std::vector<char>> filled(table.layers.size(),
                                        std::vector<char>(sub_functions.size(), 0));
  for (const ActivationRecord& record : records) {
    const int slot = table.LayerSlot(record.layer);
    const int sub = table.SubFunctionIndex(record.sub_function_id);
    if (filled[slot][sub]) {
      throw ValidationError("duplicate activation record for '" +
                            record.sub_function_id + "' layer " +
                            std::to_string(record.layer));
    }
    FillFromRecord(record, slot, sub, table, &table.degenerate_cells);
    filled[slot][sub] = 1;
  }
  for (size_t slot = 0; slot < filled.size(); ++slot) {
    for (size_t sub = 0; sub < filled[slot].size(); ++sub) {
      if (!filled[slot][sub]) {
        throw ValidationError("missing activation record for '" + table.sub_functions[sub] +
                              "' layer " + std::to_string(table.layers[slot]));
      }
    }
  }
  return table;
}

int ExpertTable::LayerSlot(int layer) const {
  const auto it = std::find(layers.begin(), layers.end(), layer);
  if (it == layers.end()) {
    throw ValidationError("expert table lacks layer " + std::to_string(layer));
  }
  return static_cast<int>(it - layers.begin());
}

Matrix ExpertPredictivityForLayer(const PredictivityTable& table,
                                  const LayerPartition& partition) {
  const int slot = table.LayerSlot(partition.layer);
  if (partition.d_ff() != table.d_ff) {
    throw ValidationError("partition of layer " + std::to_string(partition.layer) +
                          " covers " + std::to_string(partition.d_ff()) +
                          " neurons, table has " + std::to_string(table.d_ff));
  }
  const Matrix& neuron_ap = table.ap[slot];
  Matrix sums = Matrix::Zero(neuron_ap.rows(), partition.num_experts);
  std::vector<int> sizes(partition.num_experts, 0);
  for (int j = 0; j < table.d_ff; ++j) {
    const int e = partition.expert_of[j];
    sums.col(e) += neuron_ap.col(j);
    ++sizes[e];
  }
  for (int e = 0; e < partition.num_experts; ++e) {
    if (sizes[e] == 0) {
      throw ValidationError("expert " + std::to_string(e) + " has no neurons");
    }
    sums.col(e) /= static_cast<double>(sizes[e]);
  }
  return sums;
}

ExpertTable ExpertPredictivity(const PredictivityTable& table,
                               const Partition& partition) {
  ExpertTable out;
  out.layers = table.layers;
  out.sub_functions = table.sub_functions;
  for (int layer : table.layers) {
    const LayerPartition& p = partition.ForLayer(layer);
    out.num_experts.push_back(p.num_experts);
    out.ap.push_back(ExpertPredictivityForLayer(table, p));
  }
  return out;
}

std::string TableToCsv(const PredictivityTable& table) {
  std::string out = "layer,neuron,sub_function,ap\n";
  for (size_t slot = 0; slot < table.layers.size(); ++slot) {
    for (int j = 0; j < table.d_ff; ++j) {
      for (size_t s = 0; s < table.sub_functions.size(); ++s) {
        out += std::to_string(table.layers[slot]) + ',' + std::to_string(j) + ',' +
               table.sub_functions[s] + ',' +
               FormatDouble(table.ap[slot](static_cast<Eigen::Index>(s), j)) + '\n';
      }
    }
  }
  return out;
}

std::string ExpertTableToCsv(const ExpertTable& table) {
  std::string out = "layer,expert,sub_function,ap\n";
  for (size_t slot = 0; slot < table.layers.size(); ++slot) {
    for (int e = 0; e < table.num_experts[slot]; ++e) {
      for (size_t s = 0; s < table.sub_functions.size(); ++s) {
        out += std::to_string(table.layers[slot]) + ',' + std::to_string(e) + ',' +
               table.sub_functions[s] + ',' +
               FormatDouble(table.ap[slot](static_cast<Eigen::Index>(s), e)) + '\n';
      }
    }
  }
  return out;
}

std::string EncodeTable(const PredictivityTable& table) {
  const nlohmann::json header = {
      {"layers", table.layers},
      {"d_ff", table.d_ff},
      {"sub_functions", table.sub_functions},
      {"degenerate_cells", table.degenerate_cells},
  };
  std::string out = internal::BeginContainer(kTableMagic, kFormatVersion, header);
  for (const Matrix& m : table.ap) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) AppendPod<double>(out, m(r, c));
    }
  }
  return out;
}

PredictivityTable DecodeTable(std::string_view bytes) {
  const auto container = internal::ReadContainer(bytes, kTableMagic, kFormatVersion);
  PredictivityTable table;
  try {
    table.layers = container.header.at("layers").get<std::vector<int>>();
    table.d_ff = container.header.at("d_ff").get<int>();
    table.sub_functions =
        container.header.at("sub_functions").get<std::vector<std::string>>();
    table.degenerate_cells = container.header.value("degenerate_cells", 0);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed table header: ") + e.what(),
                     internal::kPreambleSize);
  }
  const size_t rows = table.sub_functions.size();
  const size_t need = table.layers.size() * rows * table.d_ff * sizeof(double);
  if (bytes.size() - container.payload_offset != need) {
    throw ParseError("table payload has wrong size", container.payload_offset);
  }
  size_t offset = container.payload_offset;
  for (size_t slot = 0; slot < table.layers.size(); ++slot) {
    Matrix m(rows, table.d_ff);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        m(r, c) = ReadPod<double>(bytes, offset);
        offset += sizeof(double);
      }
    }
    table.ap.push_back(std::move(m));
  }
  return table;
}

std::string EncodeActivationRecord(const ActivationRecord& record) {
  const auto rows = record.activations.rows();
  if (static_cast<size_t>(rows) != record.labels.size()) {
    throw ValidationError("activation record rows and labels differ");
  }
  const nlohmann::json header = {
      {"sub_function", record.sub_function_id},
      {"layer", record.layer},
      {"rows", rows},
      {"cols", record.activations.cols()},
  };
  std::string out = internal::BeginContainer(kRecordMagic, kFormatVersion, header);
  for (int label : record.labels) AppendPod<std::int32_t>(out, label);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < record.activations.cols(); ++c) {
      AppendPod<float>(out, static_cast<float>(record.activations(r, c)));
    }
  }
  return out;
}

ActivationRecord DecodeActivationRecord(std::string_view bytes) {
  const auto container = internal::ReadContainer(bytes, kRecordMagic, kFormatVersion);
  ActivationRecord record;
  Eigen::Index rows = 0, cols = 0;
  try {
    record.sub_function_id = container.header.at("sub_function").get<std::string>();
    record.layer = container.header.at("layer").get<int>();
    rows = container.header.at("rows").get<Eigen::Index>();
    cols = container.header.at("cols").get<Eigen::Index>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed record header: ") + e.what(),
                     internal::kPreambleSize);
  }
  if (rows < 0 || cols < 0) throw ParseError("negative shape", internal::kPreambleSize);
  const size_t need = static_cast<size_t>(rows) * sizeof(std::int32_t) +
                      static_cast<size_t>(rows * cols) * sizeof(float);
  if (bytes.size() - container.payload_offset != need) {
    throw ParseError("record payload has wrong size", container.payload_offset);
  }
  size_t offset = container.payload_offset;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const int label = ReadPod<std::int32_t>(bytes, offset);
    if (label != 0 && label != 1) throw ParseError("label outside {0, 1}", offset);
    record.labels.push_back(label);
    offset += sizeof(std::int32_t);
  }
  record.activations.resize(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      record.activations(r, c) = ReadPod<float>(bytes, offset);
      offset += sizeof(float);
    }
  }
  if (!record.activations.allFinite()) {
    throw ParseError("non-finite activation", container.payload_offset);
  }
  return record;
}

void SaveActivationRecord(const ActivationRecord& record,
                          const std::filesystem::path& path) {
  WriteFileBytes(path, EncodeActivationRecord(record));
}

ActivationRecord LoadActivationRecord(const std::filesystem::path& path) {
  return DecodeActivationRecord(ReadFileBytes(path));
}

}  // namespace modscope
