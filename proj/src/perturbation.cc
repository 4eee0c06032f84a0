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

#include "modscope/perturbation.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numeric>
#include <random>
#include <set>

#include "modscope/checkpoint.h"
#include "modscope/errors.h"
#include "modscope/parallel.h"

namespace modscope {
namespace {

std::uint64_t MixSeed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<int> DescendingOrder(const Vector& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

std::string_view ModeName(PerturbationMode mode) {
  return mode == PerturbationMode::kNoise ? "noise" : "route_restrict";
}

std::string_view BasisName(RankingBasis basis) {
  switch (basis) {
    case RankingBasis::kSingleDataset: return "single_dataset";
    case RankingBasis::kSumOverSeen: return "sum_over_seen";
    case RankingBasis::kRandom: return "random";
    case RankingBasis::kExpertSum: return "expert_sum";
  }
  return "";
}

void PerturbationPlan::Validate(const ModelConfig* config) const {
  if (mode == PerturbationMode::kNoise) {
    if (!(noise_variance > 0.0) || !std::isfinite(noise_variance)) {
      throw ConfigError("noise_variance must be positive in noise mode");
    }
  } else {
    for (const auto& [layer, experts] : targets) {
      if (experts.empty()) {
        throw ConfigError("empty allow-list for layer " + std::to_string(layer));
      }
    }
  }
  if (config == nullptr) return;
  for (const auto& [layer, ids] : targets) {
    if (layer < 0 || layer >= config->num_layers) {
      throw ConfigError("target layer " + std::to_string(layer) + " out of range");
    }
    const int limit =
        mode == PerturbationMode::kNoise ? config->d_ff : config->num_experts;
    for (int id : ids) {
      if (id < 0 || id >= limit) {
        throw ConfigError("target " + std::to_string(id) + " out of range in layer " +
                          std::to_string(layer));
      }
    }
    if (mode == PerturbationMode::kRouteRestrict && !config->IsMoeLayer(layer)) {
      throw ConfigError("layer " + std::to_string(layer) + " is not a MoE layer");
    }
  }
}

nlohmann::json PlanToJson(const PerturbationPlan& plan) {
  nlohmann::json targets = nlohmann::json::object();
  for (const auto& [layer, ids] : plan.targets) targets[std::to_string(layer)] = ids;
  return {
      {"mode", ModeName(plan.mode)},
      {"targets", targets},
      {"noise_variance", plan.noise_variance},
      {"layers", plan.layers},
      {"ranking_basis", BasisName(plan.ranking_basis)},
  };
}

PerturbationPlan PlanFromJson(const nlohmann::json& json) {
  PerturbationPlan plan;
  try {
    const std::string mode = json.value("mode", "noise");
    if (mode == "noise") {
      plan.mode = PerturbationMode::kNoise;
    } else if (mode == "route_restrict") {
      plan.mode = PerturbationMode::kRouteRestrict;
    } else {
      throw ConfigError("unknown perturbation mode '" + mode + "'");
    }
    if (json.contains("targets")) {
      for (const auto& [key, value] : json.at("targets").items()) {
        plan.targets[std::stoi(key)] = value.get<std::vector<int>>();
      }
    }
    plan.noise_variance = json.value("noise_variance", 4.0);
    plan.layers = json.value("layers", std::vector<int>{});
    const std::string basis = json.value("ranking_basis", "sum_over_seen");
    if (basis == "single_dataset") {
      plan.ranking_basis = RankingBasis::kSingleDataset;
    } else if (basis == "sum_over_seen") {
      plan.ranking_basis = RankingBasis::kSumOverSeen;
    } else if (basis == "random") {
      plan.ranking_basis = RankingBasis::kRandom;
    } else if (basis == "expert_sum") {
      plan.ranking_basis = RankingBasis::kExpertSum;
    } else {
      throw ConfigError("unknown ranking basis '" + basis + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed plan: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw ConfigError("malformed plan: layer keys must be integers");
  }
  plan.Validate();
  return plan;
}

PerturbationPlan LoadPlan(const std::filesystem::path& path) {
  const std::string text = ReadFileBytes(path);
  nlohmann::json json;
  try {
    json = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte);
  }
  return PlanFromJson(json);
}

std::vector<int> RankTargets(const PredictivityTable& table, int layer,
                             std::span<const std::string> seen, Granularity granularity,
                             const LayerPartition* partition) {
  if (seen.empty()) throw ConfigError("ranking needs at least one seen dataset");
  const int slot = table.LayerSlot(layer);
  std::vector<int> rows;
  for (const auto& id : seen) rows.push_back(table.SubFunctionIndex(id));
  if (granularity == Granularity::kNeuron) {
    Vector total = Vector::Zero(table.d_ff);
    for (int r : rows) total += table.ap[slot].row(r).transpose();
    return DescendingOrder(total);
  }
  if (partition == nullptr) throw ConfigError("expert ranking needs a partition");
  if (partition->d_ff() != table.d_ff) {
    throw ValidationError("partition and table disagree on d_ff");
  }
  const Matrix expert_ap = ExpertPredictivityForLayer(table, *partition);
  Vector total = Vector::Zero(partition->num_experts);
  for (int r : rows) total += expert_ap.row(r).transpose();
  return DescendingOrder(total);
}

int TargetCount(double proportion, int n) {
  if (!(proportion >= 0.0 && proportion <= 1.0)) {
    throw ConfigError("proportion must lie in [0, 1]");
  }
  return static_cast<int>(std::floor(proportion * n + 0.5));
}

PerturbationPlan BuildNoisePlan(const PredictivityTable& table,
                                std::span<const std::string> seen,
                                const Partition* partition, std::span<const int> layers,
                                double proportion, RankingBasis basis,
                                std::uint64_t seed, double noise_variance) {
  PerturbationPlan plan;
  plan.mode = PerturbationMode::kNoise;
  plan.noise_variance = noise_variance;
  plan.ranking_basis = basis;
  plan.layers.assign(layers.begin(), layers.end());
  if (basis == RankingBasis::kSingleDataset && seen.size() != 1) {
    throw ConfigError("single_dataset ranking needs exactly one seen dataset");
  }
  for (int layer : layers) {
    std::vector<int> chosen;
    switch (basis) {
      case RankingBasis::kSingleDataset:
      case RankingBasis::kSumOverSeen: {
        auto order = RankTargets(table, layer, seen, Granularity::kNeuron);
        order.resize(TargetCount(proportion, table.d_ff));
        chosen = std::move(order);
        break;
      }
      case RankingBasis::kExpertSum: {
        if (partition == nullptr) throw ConfigError("expert_sum needs a partition");
        const LayerPartition& lp = partition->ForLayer(layer);
        auto order = RankTargets(table, layer, seen, Granularity::kExpert, &lp);
        const auto members = lp.Members();
        order.resize(TargetCount(proportion, lp.num_experts));
        for (int e : order) chosen.insert(chosen.end(), members[e].begin(), members[e].end());
        break;
      }
      case RankingBasis::kRandom: {
        int count = TargetCount(proportion, table.d_ff);
        if (partition != nullptr) {
          const LayerPartition& lp = partition->ForLayer(layer);
          count = TargetCount(proportion, lp.num_experts) * (lp.d_ff() / lp.num_experts);
        }
        std::vector<int> all(table.d_ff);
        std::iota(all.begin(), all.end(), 0);
        std::mt19937_64 rng(MixSeed(seed, static_cast<std::uint64_t>(layer)));
        std::shuffle(all.begin(), all.end(), rng);
        all.resize(count);
        chosen = std::move(all);
        break;
      }
    }
    std::sort(chosen.begin(), chosen.end());
    plan.targets[layer] = std::move(chosen);
  }
  plan.Validate();
  return plan;
}

ForwardTrace NoiseForward(const Model& model, const PerturbationPlan& plan,
                          std::span<const int> tokens, std::uint64_t seed) {
  if (plan.mode != PerturbationMode::kNoise) {
    throw ConfigError("NoiseForward needs a noise-mode plan");
  }
  plan.Validate(&model.config);
  ForwardOptions options;
  bool any = false;
  for (const auto& [layer, ids] : plan.targets) any = any || !ids.empty();
  if (any) {
    auto rng = std::make_shared<std::mt19937_64>(seed);
    const double stddev = std::sqrt(plan.noise_variance);
    options.activation_hook = [&plan, rng, stddev](int layer, int,
                                                    Eigen::Ref<Vector> activations) {
      auto it = plan.targets.find(layer);
      if (it == plan.targets.end()) return;
      std::normal_distribution<double> noise(0.0, stddev);
      for (int n : it->second) activations[n] += noise(*rng);
    };
  }
  return EncoderForward(model, tokens, options);
}

Model RestrictRouting(const Model& model,
                      const std::map<int, std::vector<int>>& allow_lists) {
  if (!model.config.HasMoeLayers()) {
    throw ConfigError("routing restriction needs a model with MoE layers");
  }
  PerturbationPlan plan;
  plan.mode = PerturbationMode::kRouteRestrict;
  plan.targets = allow_lists;
  plan.Validate(&model.config);
  Model restricted = model;
  for (const auto& [layer, experts] : allow_lists) {
    std::vector<int> sorted = experts;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    restricted.config.allowed_experts[layer] = std::move(sorted);
  }
  restricted.config.Validate();
  return restricted;
}

std::vector<int> AllowList(const ExpertTestResult& entry, int num_experts,
                           bool keep_functional) {
  std::set<int> functional;
  for (int e : entry.FunctionalExperts()) functional.insert(e);
  std::vector<int> allowed;
  for (int e = 0; e < num_experts; ++e) {
    if (functional.contains(e) == keep_functional) allowed.push_back(e);
  }
  if (allowed.empty()) {
    throw ConfigError(keep_functional ? "no functional experts to keep"
                                      : "every expert is functional");
  }
  return allowed;
}

Vector PooledFeatures(const ForwardTrace& trace) {
  return trace.output.colwise().maxCoeff().transpose();
}

int Readout::Predict(const Vector& pooled) const {
  const Vector z = (pooled - mean).cwiseQuotient(scale);
  return weights.dot(z) + bias > 0.0 ? 1 : 0;
}

Readout TrainReadout(const Model& model, const SubFunctionDataset& dataset,
                     const ReadoutOptions& options) {
  dataset.Validate();
  const int n = static_cast<int>(dataset.instances.size());
  const int d = model.config.d_model;
  Matrix features(n, d);
  Vector labels(n);
  ParallelFor(n, [&](int i) {
    features.row(i) =
        PooledFeatures(EncoderForward(model, dataset.instances[i].tokens)).transpose();
  });
  for (int i = 0; i < n; ++i) labels[i] = dataset.instances[i].label;

  Readout readout;
  readout.mean = features.colwise().mean().transpose();
  readout.scale = Vector::Ones(d);
  for (int c = 0; c < d; ++c) {
    const double sd =
        std::sqrt((features.col(c).array() - readout.mean[c]).square().mean());
    if (sd > 1e-12) readout.scale[c] = sd;
  }
  const Matrix z =
      (features.rowwise() - readout.mean.transpose()).array().rowwise() /
      readout.scale.transpose().array();
  readout.weights = Vector::Zero(d);
  for (int it = 0; it < options.iterations; ++it) {
    const Vector logits = (z * readout.weights).array() + readout.bias;
    const Vector p = (1.0 / (1.0 + (-logits.array()).exp())).matrix();
    const Vector err = p - labels;
    const Vector grad_w = z.transpose() * err / n + options.l2 * readout.weights;
    const double grad_b = err.mean();
    readout.weights -= options.learning_rate * grad_w;
    readout.bias -= options.learning_rate * grad_b;
  }
  return readout;
}

double EvaluateAccuracy(const Model& model, const SubFunctionDataset& dataset,
                        const Readout& readout, const PerturbationPlan* plan,
                        std::uint64_t seed, int threads) {
  const int n = static_cast<int>(dataset.instances.size());
  if (n == 0) return 0.0;
  const Model* subject = &model;
  Model restricted;
  if (plan != nullptr && plan->mode == PerturbationMode::kRouteRestrict) {
    restricted = RestrictRouting(model, plan->targets);
    subject = &restricted;
  }
  std::vector<int> correct(n, 0);
  ParallelFor(
      n,
      [&](int i) {
        const auto& instance = dataset.instances[i];
        ForwardTrace trace =
            plan != nullptr && plan->mode == PerturbationMode::kNoise
                ? NoiseForward(*subject, *plan, instance.tokens,
                               MixSeed(seed, static_cast<std::uint64_t>(i)))
                : EncoderForward(*subject, instance.tokens);
        correct[i] = readout.Predict(PooledFeatures(trace)) == instance.label;
      },
      threads);
  return static_cast<double>(std::accumulate(correct.begin(), correct.end(), 0)) / n;
}

double MeanPerturbedAccuracy(const Model& model, const SubFunctionDataset& dataset,
                             const Readout& readout, const PerturbationPlan& plan,
                             std::uint64_t seed, int runs, int threads) {
  if (runs < 1) throw ConfigError("runs must be positive");
  double total = 0.0;
  for (int r = 0; r < runs; ++r) {
    total += EvaluateAccuracy(model, dataset, readout, &plan,
                              MixSeed(seed, 1000003ULL + static_cast<std::uint64_t>(r)),
                              threads);
  }
  return total / runs;
}

std::string ResultsToCsv(std::span<const PerturbationResult> results) {
  // Shortest text that reads back to the same double.
  auto number = [](double v) {
    char buffer[32];
    const auto end = std::to_chars(buffer, buffer + sizeof(buffer), v).ptr;
    return std::string(buffer, end);
  };
  std::string out = "condition,proportion,seed,accuracy\n";
  for (const auto& r : results) {
    out += r.condition + ',' + number(r.proportion) + ',' + std::to_string(r.seed) + ',' +
           number(r.accuracy) + '\n';
  }
  return out;
}

}  // namespace modscope
