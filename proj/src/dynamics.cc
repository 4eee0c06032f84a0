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

#include "modscope/dynamics.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "modscope/checkpoint.h"
#include "modscope/errors.h"
#include "modscope/parallel.h"

namespace modscope {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::uint64_t MixSeed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct MeanStderr {
  double mean = kNaN;
  double stderr_value = 0.0;
  int count = 0;
};

MeanStderr Summarize(const std::vector<double>& values) {
  MeanStderr out;
  out.count = static_cast<int>(values.size());
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / values.size();
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.stderr_value = std::sqrt(ss / (values.size() - 1) / values.size());
  }
  return out;
}

std::string Format(double value) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

// Sub-function groups: each function, then "all".
std::vector<std::pair<std::string, std::vector<int>>> Groups(const PredictivityTable& table,
                                                             const FunctionSuite& suite) {
  std::vector<std::pair<std::string, std::vector<int>>> groups;
  std::vector<int> all;
  for (const auto& function : suite.Functions()) {
    std::vector<int> rows;
    for (int index : suite.IndicesOf(function)) {
      rows.push_back(table.SubFunctionIndex(suite.sub_functions[index].id));
    }
    all.insert(all.end(), rows.begin(), rows.end());
    groups.emplace_back(function, std::move(rows));
  }
  std::sort(all.begin(), all.end());
  groups.emplace_back("all", std::move(all));
  return groups;
}

void CheckSeries(const SeriesTables& series) {
  if (series.tables.size() < 2 || series.steps.size() != series.tables.size()) {
    throw ValidationError("a series needs at least two checkpoints with steps");
  }
  for (std::size_t i = 1; i < series.steps.size(); ++i) {
    if (series.steps[i] <= series.steps[i - 1]) {
      throw ValidationError("checkpoint steps must be strictly increasing");
    }
  }
  for (const auto& table : series.tables) {
    if (table.layers != series.tables.front().layers ||
        table.d_ff != series.tables.front().d_ff ||
        table.sub_functions != series.tables.front().sub_functions) {
      throw ValidationError("predictivity tables of a series must share their shape");
    }
  }
}

// Per-checkpoint, per-layer-slot predictivity matrices (sub-functions x n).
using LevelTables = std::vector<std::vector<Matrix>>;

LevelTables NeuronTables(const SeriesTables& series) {
  LevelTables out;
  for (const auto& table : series.tables) out.push_back(table.ap);
  return out;
}

LevelTables ExpertTables(const SeriesTables& series,
                         const std::vector<LayerPartition>& partitions) {
  LevelTables out;
  for (const auto& table : series.tables) {
    std::vector<Matrix> slots;
    for (const auto& lp : partitions) slots.push_back(ExpertPredictivityForLayer(table, lp));
    out.push_back(std::move(slots));
  }
  return out;
}

// rho[pair][group] values over sub-functions and layers.
std::vector<std::vector<std::vector<double>>> AdjacentCorrelations(
    const LevelTables& tables,
    const std::vector<std::pair<std::string, std::vector<int>>>& groups,
    std::vector<std::vector<int>>* skipped) {
  const std::size_t pairs = tables.size() - 1;
  std::vector<std::vector<std::vector<double>>> rho(
      pairs, std::vector<std::vector<double>>(groups.size()));
  if (skipped != nullptr) skipped->assign(pairs, std::vector<int>(groups.size(), 0));
  for (std::size_t t = 0; t < pairs; ++t) {
    for (std::size_t slot = 0; slot < tables[t].size(); ++slot) {
      const Matrix& a = tables[t][slot];
      const Matrix& b = tables[t + 1][slot];
      for (std::size_t g = 0; g < groups.size(); ++g) {
        for (int row : groups[g].second) {
          const Vector x = a.row(row).transpose();
          const Vector y = b.row(row).transpose();
          try {
            rho[t][g].push_back(Spearman(std::span<const double>(x.data(), x.size()),
                                         std::span<const double>(y.data(), y.size())));
          } catch (const ComputeError&) {
            if (skipped != nullptr) ++(*skipped)[t][g];
          }
        }
      }
    }
  }
  return rho;
}

}  // namespace

std::vector<double> AverageRanks(std::span<const double> values) {
  const int n = static_cast<int>(values.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (int i = 0; i < n;) {
    int j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = (i + j) / 2.0 + 1.0;
    for (int t = i; t <= j; ++t) ranks[order[t]] = rank;
    i = j + 1;
  }
  return ranks;
}

double Spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ValidationError("spearman inputs differ in length");
  if (x.size() < 2) throw ValidationError("spearman needs at least two values");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
      throw ValidationError("spearman inputs must be finite");
    }
  }
  const std::vector<double> rx = AverageRanks(x);
  const std::vector<double> ry = AverageRanks(y);
  const double n = static_cast<double>(rx.size());
  const double mean = (n + 1.0) / 2.0;  // mean rank is fixed under averaging
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    const double dx = rx[i] - mean;
    const double dy = ry[i] - mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    throw ComputeError("spearman correlation is undefined for a constant vector");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

void CheckpointSeries::Validate() const {
  if (entries.empty()) throw ValidationError("empty checkpoint series");
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].step <= entries[i - 1].step) {
      throw ValidationError("checkpoint steps must be strictly increasing");
    }
  }
}

CheckpointSeries ScanSeries(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) {
    throw IoError(dir.string() + " is not a directory");
  }
  CheckpointSeries series;
  for (const auto& item : std::filesystem::directory_iterator(dir)) {
    if (item.path().extension() != ".ckpt") continue;
    series.entries.push_back({LoadCheckpoint(item.path()).meta.step, item.path()});
  }
  std::sort(series.entries.begin(), series.entries.end(),
            [](const SeriesEntry& a, const SeriesEntry& b) { return a.step < b.step; });
  series.Validate();
  return series;
}

SeriesTables BuildSeriesTables(const CheckpointSeries& series, const FunctionSuite& suite,
                               std::span<const int> layers, const TableOptions& options) {
  series.Validate();
  SeriesTables out;
  ModelConfig first;
  for (std::size_t i = 0; i < series.entries.size(); ++i) {
    Checkpoint checkpoint = LoadCheckpoint(series.entries[i].path);
    if (i == 0) {
      first = checkpoint.model.config;
    } else if (!(checkpoint.model.config == first)) {
      throw ValidationError(series.entries[i].path.string() +
                            " has a different model configuration");
    }
    out.steps.push_back(series.entries[i].step);
    out.tables.push_back(BuildTable(checkpoint.model, suite, layers, options));
  }
  return out;
}

SeriesTables BuildSeriesTables(std::span<const Model> models,
                               std::span<const std::int64_t> steps,
                               const FunctionSuite& suite, std::span<const int> layers,
                               const TableOptions& options) {
  if (models.size() != steps.size()) {
    throw ValidationError("one step per model is required");
  }
  SeriesTables out;
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (i > 0 && !(models[i].config == models[0].config)) {
      throw ValidationError("models of a series must share their configuration");
    }
    if (i > 0 && steps[i] <= steps[i - 1]) {
      throw ValidationError("checkpoint steps must be strictly increasing");
    }
    out.steps.push_back(steps[i]);
    out.tables.push_back(BuildTable(models[i], suite, layers, options));
  }
  return out;
}

std::string_view LevelName(Level level) {
  return level == Level::kNeuron ? "neuron" : "expert";
}

std::vector<StabilizationPoint> StabilizationCurve(const SeriesTables& series,
                                                   const FunctionSuite& suite, Level level,
                                                   const Partition* partition,
                                                   const StabilizationOptions& options) {
  CheckSeries(series);
  const PredictivityTable& last = series.tables.back();
  const auto groups = Groups(last, suite);

  std::vector<LayerPartition> partitions;
  if (level == Level::kExpert) {
    if (partition == nullptr) throw ConfigError("expert level needs a partition");
    for (int layer : last.layers) partitions.push_back(partition->ForLayer(layer));
  }
  const LevelTables tables =
      level == Level::kNeuron ? NeuronTables(series) : ExpertTables(series, partitions);
  const int length = static_cast<int>(tables.front().front().cols());

  std::vector<std::vector<int>> skipped;
  const auto rho = AdjacentCorrelations(tables, groups, &skipped);
  std::vector<StabilizationPoint> points;
  for (std::size_t t = 0; t < rho.size(); ++t) {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const MeanStderr s = Summarize(rho[t][g]);
      points.push_back({series.steps[t + 1], groups[g].first, std::string(LevelName(level)),
                        s.mean, s.stderr_value, length, skipped[t][g]});
    }
  }
  if (level == Level::kNeuron || options.baseline_draws <= 0) return points;

  // draws x pairs x groups of mean correlations.
  std::vector<std::vector<std::vector<double>>> draws(options.baseline_draws);
  ParallelFor(options.baseline_draws, [&](int d) {
    std::vector<LayerPartition> random;
    for (const auto& lp : partitions) {
      random.push_back(RandomPartition(
          lp.layer, lp.d_ff(), lp.num_experts,
          MixSeed(options.seed, static_cast<std::uint64_t>(d) * 1024 + lp.layer)));
    }
    const auto r = AdjacentCorrelations(ExpertTables(series, random), groups, nullptr);
    draws[d].assign(r.size(), std::vector<double>(groups.size(), kNaN));
    for (std::size_t t = 0; t < r.size(); ++t) {
      for (std::size_t g = 0; g < groups.size(); ++g) draws[d][t][g] = Summarize(r[t][g]).mean;
    }
  });
  for (std::size_t t = 0; t < rho.size(); ++t) {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      std::vector<double> values;
      for (const auto& draw : draws) {
        if (!std::isnan(draw[t][g])) values.push_back(draw[t][g]);
      }
      const MeanStderr s = Summarize(values);
      points.push_back({series.steps[t + 1], groups[g].first, "expert_random", s.mean,
                        s.stderr_value, length, options.baseline_draws - s.count});
    }
  }
  return points;
}

double FirstReachFraction(std::span<const StabilizationPoint> curve,
                          std::string_view function, std::string_view level,
                          double threshold) {
  std::int64_t last_step = 0;
  for (const auto& p : curve) last_step = std::max(last_step, p.step);
  if (last_step <= 0) return kNaN;
  std::int64_t first = -1;
  for (const auto& p : curve) {
    if (p.function != function || p.level != level || !(p.value >= threshold)) continue;
    if (first < 0 || p.step < first) first = p.step;
  }
  return first < 0 ? kNaN : static_cast<double>(first) / static_cast<double>(last_step);
}

std::vector<EmergencePoint> EmergenceCurve(const SeriesTables& series,
                                           const FunctionSuite& suite,
                                           const Partition& partition,
                                           const EmergenceOptions& options) {
  if (series.tables.empty() || series.steps.size() != series.tables.size()) {
    throw ValidationError("empty checkpoint series");
  }
  options.detect.Validate();
  std::vector<EmergencePoint> points;
  auto append_layer_mean = [&](std::int64_t step, const std::string& partitioning,
                               const std::vector<EmergencePoint>& per_layer) {
    std::map<std::string, std::vector<const EmergencePoint*>> by_function;
    for (const auto& p : per_layer) by_function[p.function].push_back(&p);
    for (const auto& [function, items] : by_function) {
      EmergencePoint mean{step, -1, function, partitioning};
      for (const auto* p : items) {
        mean.prop += p->prop / items.size();
        mean.degree += p->degree / items.size();
      }
      points.push_back(mean);
    }
  };
  for (std::size_t t = 0; t < series.tables.size(); ++t) {
    const FunctionalExpertReport report =
        DetectFunctionalExperts(series.tables[t], partition, suite, options.detect);
    std::vector<EmergencePoint> per_layer;
    for (const auto& entry : report.entries) {
      per_layer.push_back(
          {series.steps[t], entry.layer, entry.group, "given", entry.prop, entry.degree});
    }
    points.insert(points.end(), per_layer.begin(), per_layer.end());
    append_layer_mean(series.steps[t], "given", per_layer);
  }
  if (options.random_draws <= 0) return points;

  const PredictivityTable& last = series.tables.back();
  std::vector<FunctionalExpertReport> reports(options.random_draws);
  ParallelFor(options.random_draws, [&](int d) {
    Partition random;
    random.provenance = "random";
    for (int layer : last.layers) {
      const LayerPartition& lp = partition.ForLayer(layer);
      random.layers.push_back(RandomPartition(
          layer, lp.d_ff(), lp.num_experts,
          MixSeed(options.seed, static_cast<std::uint64_t>(d) * 1024 + layer)));
    }
    reports[d] = DetectFunctionalExperts(last, random, suite, options.detect);
  });
  // key: (layer, function), layer -1 for the layer mean.
  std::map<std::pair<int, std::string>, std::pair<std::vector<double>, std::vector<double>>>
      values;
  for (const auto& report : reports) {
    std::map<std::string, std::pair<double, int>> prop_sum, degree_sum;
    for (const auto& entry : report.entries) {
      auto& v = values[{entry.layer, entry.group}];
      v.first.push_back(entry.prop);
      v.second.push_back(entry.degree);
      prop_sum[entry.group].first += entry.prop;
      prop_sum[entry.group].second += 1;
      degree_sum[entry.group].first += entry.degree;
    }
    for (const auto& [function, sum] : prop_sum) {
      auto& v = values[{-1, function}];
      v.first.push_back(sum.first / sum.second);
      v.second.push_back(degree_sum[function].first / sum.second);
    }
  }
  for (const auto& [key, v] : values) {
    const MeanStderr p = Summarize(v.first);
    const MeanStderr g = Summarize(v.second);
    points.push_back({series.steps.back(), key.first, key.second, "random", p.mean, g.mean,
                      p.stderr_value, g.stderr_value});
  }
  return points;
}

Matrix ExpertOverlapTopK(const Matrix& expert_ap, int k) {
  const int m = static_cast<int>(expert_ap.rows());
  const int e = static_cast<int>(expert_ap.cols());
  if (k < 1 || k > e) {
    throw ConfigError("top-k depth " + std::to_string(k) + " must lie in [1, " +
                      std::to_string(e) + "]");
  }
  std::vector<std::vector<char>> top(m, std::vector<char>(e, 0));
  for (int i = 0; i < m; ++i) {
    std::vector<int> order(e);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return expert_ap(i, a) > expert_ap(i, b);
    });
    for (int t = 0; t < k; ++t) top[i][order[t]] = 1;
  }
  Matrix overlap(m, m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      int count = 0;
      for (int x = 0; x < e; ++x) count += top[i][x] && top[j][x];
      overlap(i, j) = count;
    }
  }
  return overlap;
}

ClusteringScore ComputeClusteringScore(const Matrix& similarity,
                                       std::span<const Matrix> overlaps,
                                       bool exclude_self) {
  const int m = static_cast<int>(similarity.rows());
  if (similarity.cols() != m) throw ValidationError("similarity matrix must be square");
  if (overlaps.empty()) throw ConfigError("at least one overlap depth is required");
  ClusteringScore score;
  double total = 0.0;
  for (const Matrix& overlap : overlaps) {
    if (overlap.rows() != m || overlap.cols() != m) {
      throw ValidationError("overlap and similarity matrices are not aligned");
    }
    for (int i = 0; i < m; ++i) {
      std::vector<double> s, o;
      for (int j = 0; j < m; ++j) {
        if (exclude_self && j == i) continue;
        s.push_back(similarity(i, j));
        o.push_back(overlap(i, j));
      }
      try {
        total += Spearman(s, o);
        ++score.terms;
      } catch (const ComputeError&) {
        ++score.skipped;
      }
    }
  }
  score.value = score.terms > 0 ? total / score.terms : kNaN;
  return score;
}

ClusteringReport ClusteringScoreByLayer(const ExpertTable& experts,
                                        const Matrix& similarity, int max_k,
                                        bool exclude_self) {
  if (max_k < 1) throw ConfigError("maximum top-k depth must be >= 1");
  ClusteringReport report;
  double total = 0.0;
  int used = 0;
  for (std::size_t slot = 0; slot < experts.layers.size(); ++slot) {
    std::vector<Matrix> overlaps;
    for (int k = 1; k <= max_k; ++k) overlaps.push_back(ExpertOverlapTopK(experts.ap[slot], k));
    LayerClusteringScore layer{experts.layers[slot],
                               ComputeClusteringScore(similarity, overlaps, exclude_self)};
    if (layer.score.terms > 0) {
      total += layer.score.value;
      ++used;
    }
    report.layers.push_back(layer);
  }
  report.global_mean = used > 0 ? total / used : kNaN;
  return report;
}

Matrix ParseSimilarity(std::string_view text, std::span<const std::string> order) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<std::string> header;
  std::map<std::string, std::vector<double>> rows;
  int line_no = 0;
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ss(s);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!s.empty() && s.back() == ',') cells.emplace_back();
    return cells;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line);
    if (header.empty()) {
      if (cells.size() < 2) throw ParseError("similarity header needs ids", line_no);
      header.assign(cells.begin() + 1, cells.end());
      continue;
    }
    if (cells.size() != header.size() + 1) {
      throw ParseError("similarity row has the wrong number of cells", line_no);
    }
    std::vector<double> values;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cells[c], &used));
        if (used != cells[c].size()) throw std::invalid_argument(cells[c]);
      } catch (const std::exception&) {
        throw ParseError("bad number '" + cells[c] + "'", line_no);
      }
    }
    if (!rows.emplace(cells[0], std::move(values)).second) {
      throw ParseError("duplicate similarity row '" + cells[0] + "'", line_no);
    }
  }
  std::map<std::string, int> column;
  for (std::size_t c = 0; c < header.size(); ++c) column[header[c]] = static_cast<int>(c);
  const int m = static_cast<int>(order.size());
  Matrix s(m, m);
  for (int i = 0; i < m; ++i) {
    auto row = rows.find(order[i]);
    if (row == rows.end() || !column.contains(order[i])) {
      throw ValidationError("similarity matrix lacks sub-function '" + order[i] + "'");
    }
    for (int j = 0; j < m; ++j) s(i, j) = row->second[column.at(order[j])];
  }
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < m; ++j) {
      if (!std::isfinite(s(i, j))) throw ValidationError("similarity values must be finite");
      if (std::abs(s(i, j) - s(j, i)) > 1e-12 * std::max(1.0, std::abs(s(i, j)))) {
        throw ValidationError("similarity matrix must be symmetric");
      }
    }
  }
  return s;
}

Matrix LoadSimilarity(const std::filesystem::path& path,
                      std::span<const std::string> order) {
  return ParseSimilarity(ReadFileBytes(path), order);
}

std::string StabilizationToCsv(std::span<const StabilizationPoint> points) {
  std::string out = "step,function,level,value,stderr,vector_length,skipped\n";
  for (const auto& p : points) {
    out += std::to_string(p.step) + "," + p.function + "," + p.level + "," +
           Format(p.value) + "," + Format(p.stderr_value) + "," +
           std::to_string(p.vector_length) + "," + std::to_string(p.skipped) + "\n";
  }
  return out;
}

std::string EmergenceToCsv(std::span<const EmergencePoint> points) {
  std::string out = "step,function,level,value,stderr,layer,partitioning\n";
  for (const auto& p : points) {
    const std::string layer = p.layer < 0 ? "all" : std::to_string(p.layer);
    const std::string tail = "," + layer + "," + p.partitioning + "\n";
    out += std::to_string(p.step) + "," + p.function + ",prop," + Format(p.prop) + "," +
           Format(p.prop_stderr) + tail;
    out += std::to_string(p.step) + "," + p.function + ",degree," + Format(p.degree) +
           "," + Format(p.degree_stderr) + tail;
  }
  return out;
}

std::string ClusteringToCsv(const ClusteringReport& report) {
  std::string out = "layer,score,terms,skipped\n";
  for (const auto& l : report.layers) {
    out += std::to_string(l.layer) + "," + Format(l.score.value) + "," +
           std::to_string(l.score.terms) + "," + std::to_string(l.score.skipped) + "\n";
  }
  out += "all," + Format(report.global_mean) + ",,\n";
  return out;
}

nlohmann::json DynamicsPlotData(std::span<const StabilizationPoint> stabilization,
                                std::span<const EmergencePoint> emergence) {
  auto number = [](double v) -> nlohmann::json {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
  };
  nlohmann::json stab = nlohmann::json::array();
  for (const auto& p : stabilization) {
    stab.push_back({{"step", p.step},
                    {"function", p.function},
                    {"level", p.level},
                    {"value", number(p.value)},
                    {"stderr", number(p.stderr_value)},
                    {"vector_length", p.vector_length}});
  }
  nlohmann::json emerge = nlohmann::json::array();
  for (const auto& p : emergence) {
    emerge.push_back({{"step", p.step},
                      {"layer", p.layer},
                      {"function", p.function},
                      {"partitioning", p.partitioning},
                      {"prop", number(p.prop)},
                      {"degree", number(p.degree)},
                      {"prop_stderr", number(p.prop_stderr)},
                      {"degree_stderr", number(p.degree_stderr)}});
  }
  return {{"stabilization", stab}, {"emergence", emerge}};
}

}  // namespace modscope
