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

#include "modscope/specialization.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "modscope/errors.h"

namespace modscope {
namespace {

std::string FormatValue(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Suite indices of each function, mapped to table rows.
std::vector<std::vector<int>> TableRowsByFunction(const PredictivityTable& table,
                                                  const FunctionSuite& suite,
                                                  const std::vector<std::string>& functions) {
  std::vector<std::vector<int>> rows;
  for (const std::string& f : functions) {
    std::vector<int> r;
    for (int i : suite.IndicesOf(f)) {
      r.push_back(table.SubFunctionIndex(suite.sub_functions[i].id));
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

int TopKSize(int d_ff, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("fraction must lie in (0, 1]");
  }
  const int k = static_cast<int>(std::floor(fraction * d_ff + 0.5));
  return std::clamp(k, 1, d_ff);
}

NeuronSet TopKNeurons(const PredictivityTable& table, int sub_function, int layer,
                      double fraction) {
  const int k = TopKSize(table.d_ff, fraction);
  const int slot = table.LayerSlot(layer);
  if (sub_function < 0 || sub_function >= table.ap[slot].rows()) {
    throw ValidationError("sub-function index " + std::to_string(sub_function) +
                          " outside the table");
  }
  const auto row = table.ap[slot].row(sub_function);
  std::vector<int> order(table.d_ff);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
    return row[a] > row[b] || (row[a] == row[b] && a < b);
  });
  NeuronSet set{table.sub_functions[sub_function], layer, k,
                std::vector<int>(order.begin(), order.begin() + k)};
  std::sort(set.members.begin(), set.members.end());
  return set;
}

double OverlapScore(const NeuronSet& a, const NeuronSet& b) {
  if (a.layer != b.layer) throw ValidationError("overlap across different layers");
  if (a.k != b.k || a.k < 1) throw ValidationError("overlap needs equal positive k");
  std::vector<int> common;
  std::set_intersection(a.members.begin(), a.members.end(), b.members.begin(),
                        b.members.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / a.k;
}

LayerSimilarity FunctionSimilarity(const PredictivityTable& table,
                                   const FunctionSuite& suite, int layer,
                                   double fraction) {
  LayerSimilarity out;
  out.layer = layer;
  out.functions = suite.Functions();
  const auto rows = TableRowsByFunction(table, suite, out.functions);
  std::vector<std::vector<NeuronSet>> sets(rows.size());
  for (size_t f = 0; f < rows.size(); ++f) {
    for (int r : rows[f]) sets[f].push_back(TopKNeurons(table, r, layer, fraction));
  }
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  out.overlap = Matrix::Constant(n, n, std::numeric_limits<double>::quiet_NaN());
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = a; b < n; ++b) {
      double sum = 0.0;
      long pairs = 0;
      for (size_t i = 0; i < sets[a].size(); ++i) {
        for (size_t j = (a == b ? i + 1 : 0); j < sets[b].size(); ++j) {
          sum += OverlapScore(sets[a][i], sets[b][j]);
          ++pairs;
        }
      }
      if (pairs > 0) out.overlap(a, b) = out.overlap(b, a) = sum / pairs;
    }
  }
  return out;
}

BestPredictivity LayerBestPredictivity(const PredictivityTable& table,
                                       const FunctionSuite& suite) {
  BestPredictivity out;
  out.layers = table.layers;
  out.functions = suite.Functions();
  const auto rows = TableRowsByFunction(table, suite, out.functions);
  out.values = Matrix::Zero(static_cast<Eigen::Index>(out.layers.size()),
                            static_cast<Eigen::Index>(out.functions.size()));
  for (size_t slot = 0; slot < out.layers.size(); ++slot) {
    for (size_t f = 0; f < rows.size(); ++f) {
      double sum = 0.0;
      for (int r : rows[f]) sum += table.ap[slot].row(r).maxCoeff();
      out.values(static_cast<Eigen::Index>(slot), static_cast<Eigen::Index>(f)) =
          sum / static_cast<double>(rows[f].size());
    }
  }
  return out;
}

SimilaritySummary SummarizeSpecialization(const PredictivityTable& table,
                                          const FunctionSuite& suite, double fraction) {
  SimilaritySummary summary;
  for (int layer : table.layers) {
    summary.similarity.push_back(FunctionSimilarity(table, suite, layer, fraction));
  }
  summary.best = LayerBestPredictivity(table, suite);
  return summary;
}

std::string SimilarityToCsv(const SimilaritySummary& summary) {
  std::string out = "layer,function_a,function_b,overlap\n";
  for (const LayerSimilarity& s : summary.similarity) {
    for (size_t a = 0; a < s.functions.size(); ++a) {
      for (size_t b = 0; b < s.functions.size(); ++b) {
        out += std::to_string(s.layer) + ',' + s.functions[a] + ',' + s.functions[b] +
               ',' + FormatValue(s.overlap(a, b)) + '\n';
      }
    }
  }
  return out;
}

std::string BestPredictivityToCsv(const BestPredictivity& best) {
  std::string out = "layer,function,best_ap\n";
  for (size_t l = 0; l < best.layers.size(); ++l) {
    for (size_t f = 0; f < best.functions.size(); ++f) {
      out += std::to_string(best.layers[l]) + ',' + best.functions[f] + ',' +
             FormatValue(best.values(l, f)) + '\n';
    }
  }
  return out;
}

nlohmann::json SpecializationPlotData(const SimilaritySummary& summary) {
  nlohmann::json heatmaps = nlohmann::json::array();
  for (const LayerSimilarity& s : summary.similarity) {
    nlohmann::json cells = nlohmann::json::array();
    for (size_t a = 0; a < s.functions.size(); ++a) {
      for (size_t b = 0; b < s.functions.size(); ++b) {
        const double v = s.overlap(a, b);
        cells.push_back({{"row", a}, {"col", b},
                         {"value", std::isnan(v) ? nlohmann::json() : nlohmann::json(v)}});
      }
    }
    heatmaps.push_back({{"layer", s.layer}, {"x_labels", s.functions},
                        {"y_labels", s.functions}, {"cells", cells}});
  }
  nlohmann::json best = nlohmann::json::array();
  for (size_t f = 0; f < summary.best.functions.size(); ++f) {
    std::vector<double> series;
    for (size_t l = 0; l < summary.best.layers.size(); ++l) {
      series.push_back(summary.best.values(l, f));
    }
    best.push_back({{"function", summary.best.functions[f]},
                    {"layers", summary.best.layers},
                    {"best_ap", series}});
  }
  return {{"similarity_heatmaps", heatmaps}, {"best_predictivity", best}};
}

}  // namespace modscope
