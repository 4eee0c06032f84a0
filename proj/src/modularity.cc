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

#include "modscope/modularity.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "modscope/errors.h"

namespace modscope {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double LogChoose(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

double LogAddExp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

double BinomialUpperTail(int r, int n, double p) {
  if (r <= 0) return 1.0;
  if (r > n) return 0.0;
  if (p <= 0.0) return 0.0;
  if (p >= 1.0) return 1.0;
  const double log_p = std::log(p);
  const double log_q = std::log1p(-p);
  double log_tail = kNegInf;
  for (int x = n; x >= r; --x) {
    log_tail = LogAddExp(log_tail, LogChoose(n, x) + x * log_p + (n - x) * log_q);
  }
  return std::min(1.0, std::exp(log_tail));
}

double ConvolvedHypergeometricTail(int r, int N, int n_E, int K, int M) {
  const int lo = std::max(0, n_E + K - N);
  const int hi = std::min(K, n_E);
  if (r <= M * lo) return 1.0;
  if (r > M * hi) return 0.0;
  std::vector<double> single(hi + 1, kNegInf);
  const double log_total = LogChoose(N, n_E);
  for (int x = lo; x <= hi; ++x) {
    single[x] = LogChoose(K, x) + LogChoose(N - K, n_E - x) - log_total;
  }
  std::vector<double> dist{0.0};  // log P(sum = 0) for zero draws
  for (int m = 0; m < M; ++m) {
    std::vector<double> next(dist.size() + hi, kNegInf);
    for (size_t s = 0; s < dist.size(); ++s) {
      if (dist[s] == kNegInf) continue;
      for (int x = lo; x <= hi; ++x) {
        next[s + x] = LogAddExp(next[s + x], dist[s] + single[x]);
      }
    }
    dist = std::move(next);
  }
  double log_tail = kNegInf;
  for (size_t s = dist.size(); s-- > static_cast<size_t>(r);) {
    log_tail = LogAddExp(log_tail, dist[s]);
  }
  return std::clamp(std::exp(log_tail), 0.0, 1.0);
}

std::string Fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::vector<int> HitCounts(std::span<const NeuronSet> sets,
                           const LayerPartition& partition) {
  std::vector<int> hits(partition.num_experts, 0);
  for (const NeuronSet& set : sets) {
    if (set.layer != partition.layer) {
      throw ValidationError("neuron set of layer " + std::to_string(set.layer) +
                            " tested against partition of layer " +
                            std::to_string(partition.layer));
    }
    for (int neuron : set.members) {
      if (neuron < 0 || neuron >= partition.d_ff()) {
        throw ValidationError("neuron " + std::to_string(neuron) + " outside partition");
      }
      ++hits[partition.expert_of[neuron]];
    }
  }
  return hits;
}

double NullPvalue(int r, int N, int n_E, int K, int M, NullMode mode) {
  if (N < 1 || n_E < 1 || K < 0 || M < 1 || K > N || n_E > N) {
    throw ConfigError("invalid null parameters N=" + std::to_string(N) +
                      " n_E=" + std::to_string(n_E) + " K=" + std::to_string(K) +
                      " M=" + std::to_string(M));
  }
  if (r < 0 || r > M * K) {
    throw ConfigError("hit count " + std::to_string(r) + " outside [0, M*K]");
  }
  switch (mode) {
    case NullMode::kBinomialApprox:
      return BinomialUpperTail(r, M * K, static_cast<double>(n_E) / N);
    case NullMode::kExactSum:
      return ConvolvedHypergeometricTail(r, N, n_E, K, M);
  }
  return 1.0;
}

void DetectOptions::Validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("fraction must lie in (0, 1]");
  }
}

std::vector<int> ExpertTestResult::FunctionalExperts() const {
  std::vector<int> out;
  for (const ExpertTest& t : experts) {
    if (t.functional) out.push_back(t.expert);
  }
  return out;
}

ExpertTestResult TestExperts(const PredictivityTable& table,
                             const LayerPartition& partition,
                             std::span<const int> sub_functions, std::string group,
                             const DetectOptions& options) {
  options.Validate();
  partition.Validate();
  if (partition.d_ff() != table.d_ff) {
    throw ValidationError("partition width differs from table width");
  }
  if (sub_functions.empty()) throw ValidationError("no sub-functions to test");
  std::vector<NeuronSet> sets;
  for (int s : sub_functions) {
    sets.push_back(TopKNeurons(table, s, partition.layer, options.fraction));
  }

  ExpertTestResult result;
  result.layer = partition.layer;
  result.group = std::move(group);
  result.num_sub_functions = static_cast<int>(sub_functions.size());
  result.k = sets.front().k;
  result.num_neurons = table.d_ff;
  result.expert_size = table.d_ff / partition.num_experts;

  const std::vector<int> hits = HitCounts(sets, partition);
  const double uniform = static_cast<double>(result.num_sub_functions) * result.k /
                         result.num_neurons;
  double degree_sum = 0.0;
  int functional = 0;
  for (int e = 0; e < partition.num_experts; ++e) {
    ExpertTest t;
    t.expert = e;
    t.hits = hits[e];
    t.p_value = NullPvalue(t.hits, result.num_neurons, result.expert_size, result.k,
                           result.num_sub_functions, options.mode);
    t.functional = t.p_value < options.alpha;
    t.degree = (static_cast<double>(t.hits) / result.expert_size) / uniform;
    if (t.functional) {
      ++functional;
      degree_sum += t.degree;
    }
    result.experts.push_back(t);
  }
  result.prop = static_cast<double>(functional) / partition.num_experts;
  result.degree = functional > 0 ? degree_sum / functional : 0.0;
  return result;
}

const ExpertTestResult& FunctionalExpertReport::Find(int layer,
                                                     const std::string& function) const {
  for (const auto& e : entries) {
    if (e.layer == layer && e.group == function) return e;
  }
  throw ValidationError("report has no entry for layer " + std::to_string(layer) +
                        " function '" + function + "'");
}

FunctionalExpertReport DetectFunctionalExperts(const PredictivityTable& table,
                                               const Partition& partition,
                                               const FunctionSuite& suite,
                                               const DetectOptions& options) {
  options.Validate();
  FunctionalExpertReport report;
  report.options = options;
  for (int layer : table.layers) {
    if (!partition.HasLayer(layer)) continue;
    const LayerPartition& p = partition.ForLayer(layer);
    for (const std::string& function : suite.Functions()) {
      std::vector<int> rows;
      for (int i : suite.IndicesOf(function)) {
        rows.push_back(table.SubFunctionIndex(suite.sub_functions[i].id));
      }
      report.entries.push_back(TestExperts(table, p, rows, function, options));
    }
  }
  if (report.entries.empty()) {
    throw ValidationError("partition covers none of the table's layers");
  }
  return report;
}

double ConsistencyAp(const ExpertTestResult& entry, const Matrix& expert_ap,
                     std::span<const int> sub_functions) {
  if (static_cast<size_t>(expert_ap.cols()) != entry.experts.size()) {
    throw ValidationError("expert predictivity width differs from the report");
  }
  if (sub_functions.empty()) throw ValidationError("no sub-functions given");
  std::vector<double> mean_ap(entry.experts.size(), 0.0);
  std::vector<int> flags(entry.experts.size(), 0);
  for (size_t e = 0; e < entry.experts.size(); ++e) {
    for (int s : sub_functions) mean_ap[e] += expert_ap(s, static_cast<Eigen::Index>(e));
    mean_ap[e] /= static_cast<double>(sub_functions.size());
    flags[e] = entry.experts[e].functional ? 1 : 0;
  }
  return AveragePrecision(mean_ap, flags);
}

std::vector<ExpertTestResult> DetectSubFunctionalExperts(
    const PredictivityTable& table, const Partition& partition,
    const std::string& sub_function, const DetectOptions& options) {
  const int row = table.SubFunctionIndex(sub_function);
  std::vector<ExpertTestResult> out;
  for (int layer : table.layers) {
    if (!partition.HasLayer(layer)) continue;
    const int rows[] = {row};
    out.push_back(TestExperts(table, partition.ForLayer(layer), rows, sub_function, options));
  }
  return out;
}

std::vector<SubFunctionalSummary> SummarizeSubFunctionalExperts(
    const PredictivityTable& table, const Partition& partition,
    const FunctionSuite& suite, const DetectOptions& options) {
  std::vector<SubFunctionalSummary> out;
  for (int layer : table.layers) {
    if (!partition.HasLayer(layer)) continue;
    const LayerPartition& p = partition.ForLayer(layer);
    for (const std::string& function : suite.Functions()) {
      SubFunctionalSummary summary{layer, function, 0.0, 0.0};
      const std::vector<int> members = suite.IndicesOf(function);
      for (int i : members) {
        const int rows[] = {table.SubFunctionIndex(suite.sub_functions[i].id)};
        const ExpertTestResult r =
            TestExperts(table, p, rows, suite.sub_functions[i].id, options);
        summary.prop += r.prop;
        summary.degree += r.degree;
      }
      summary.prop /= static_cast<double>(members.size());
      summary.degree /= static_cast<double>(members.size());
      out.push_back(summary);
    }
  }
  return out;
}

std::string ReportToCsv(const FunctionalExpertReport& report,
                        const std::string& partitioning) {
  std::vector<std::string> functions;
  std::vector<int> layers;
  for (const auto& e : report.entries) {
    if (std::find(functions.begin(), functions.end(), e.group) == functions.end()) {
      functions.push_back(e.group);
    }
    if (std::find(layers.begin(), layers.end(), e.layer) == layers.end()) {
      layers.push_back(e.layer);
    }
  }
  std::string out = "partitioning,layer";
  for (const auto& f : functions) out += "," + f + "_prop," + f + "_degree";
  out += '\n';
  std::map<std::string, std::pair<double, double>> totals;
  for (int layer : layers) {
    out += partitioning + ',' + std::to_string(layer);
    for (const auto& f : functions) {
      const ExpertTestResult& e = report.Find(layer, f);
      out += ',' + Fmt(e.prop) + ',' + Fmt(e.degree);
      totals[f].first += e.prop;
      totals[f].second += e.degree;
    }
    out += '\n';
  }
  out += partitioning + ",all";
  for (const auto& f : functions) {
    out += ',' + Fmt(totals[f].first / layers.size()) + ',' +
           Fmt(totals[f].second / layers.size());
  }
  out += '\n';
  return out;
}

std::string ExpertTestsToCsv(const FunctionalExpertReport& report) {
  std::string out = "layer,function,expert,hits,p_value,functional,degree\n";
  for (const auto& e : report.entries) {
    for (const ExpertTest& t : e.experts) {
      out += std::to_string(e.layer) + ',' + e.group + ',' + std::to_string(t.expert) +
             ',' + std::to_string(t.hits) + ',' + Fmt(t.p_value) + ',' +
             (t.functional ? "1" : "0") + ',' + Fmt(t.degree) + '\n';
    }
  }
  return out;
}

std::string SubFunctionalToCsv(const std::vector<SubFunctionalSummary>& summary,
                               const std::string& partitioning) {
  std::string out = "partitioning,layer,function,prop,degree\n";
  for (const auto& s : summary) {
    out += partitioning + ',' + std::to_string(s.layer) + ',' + s.function + ',' +
           Fmt(s.prop) + ',' + Fmt(s.degree) + '\n';
  }
  return out;
}

}  // namespace modscope
