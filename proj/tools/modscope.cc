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

// Command-line front end. Every subcommand validates its parameters before
// touching any input, writes reports plus manifest.json into --out, and maps
// failures to exit codes 2 (validation), 3 (compute) and 4 (I/O).

#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "modscope/checkpoint.h"
#include "modscope/dataset.h"
#include "modscope/dynamics.h"
#include "modscope/errors.h"
#include "modscope/modularity.h"
#include "modscope/partition.h"
#include "modscope/perturbation.h"
#include "modscope/planted.h"
#include "modscope/predictivity.h"
#include "modscope/report.h"
#include "modscope/specialization.h"
#include "modscope/trainer.h"

namespace ms = modscope;
using nlohmann::json;

namespace {

struct Common {
  std::string out;
  int threads = 0;
};

void CheckFraction(double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ms::ConfigError("fraction must lie in (0, 1]");
  }
}

void CheckAlpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ms::ConfigError("alpha must lie in (0, 1)");
}

ms::NullMode ParseNull(const std::string& name) {
  if (name == "binomial") return ms::NullMode::kBinomialApprox;
  if (name == "exact") return ms::NullMode::kExactSum;
  throw ms::ConfigError("null must be 'binomial' or 'exact'");
}

std::vector<std::string> SubFunctionIds(const ms::FunctionSuite& suite) {
  std::vector<std::string> ids;
  for (const auto& sf : suite.sub_functions) ids.push_back(sf.id);
  return ids;
}

// ---- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string kind = "planted";
  std::uint64_t seed = 0;
  // planted
  int d_ff = 256;
  int experts = 16;
  bool moe = false;
  int layers = 1;
  int planted_layer = 0;
  std::vector<std::string> functions{"task:4"};
  int neurons_per_sub = 3;
  int experts_per_function = 2;
  double strength = 1.0;
  int instances = 100;
  int length = 8;
  int filler_dims = 16;
  int filler_vocab = 32;
  std::uint64_t model_seed = 1;
  // corpus
  ms::TopicCorpusSpec corpus;
};

int RunSynth(const Common& common, const SynthArgs& a) {
  json config = {{"kind", a.kind}, {"seed", a.seed}};
  if (a.kind == "corpus") {
    a.corpus.Validate();
    config.update({{"topics", a.corpus.num_topics},
                   {"tokens_per_topic", a.corpus.tokens_per_topic},
                   {"shared_tokens", a.corpus.shared_tokens},
                   {"sequence_length", a.corpus.sequence_length},
                   {"num_sequences", a.corpus.num_sequences},
                   {"topic_purity", a.corpus.topic_purity},
                   {"topics_per_function", a.corpus.topics_per_function},
                   {"instances_per_class", a.corpus.instances_per_class}});
    ms::ReportWriter writer(common.out, "synth", config);
    const ms::TopicCorpus corpus = ms::SynthTopicCorpus(a.corpus, a.seed);
    std::string text;
    for (const auto& seq : corpus.sequences) {
      for (std::size_t i = 0; i < seq.size(); ++i) {
        text += (i ? " " : "") + std::to_string(seq[i]);
      }
      text += "\n";
    }
    writer.Write("corpus.txt", text);
    writer.Write("suite.jsonl", ms::SerializeSuite(corpus.suite));
    writer.WriteJson("vocab.json", {{"vocab_size", a.corpus.vocab_size()},
                                    {"mask_token", a.corpus.mask_token()}});
    writer.Finish();
    return 0;
  }
  if (a.kind != "planted") throw ms::ConfigError("kind must be 'planted' or 'corpus'");

  ms::PlantedSpec spec;
  spec.num_layers = a.layers;
  spec.planted_layer = a.planted_layer;
  spec.d_ff = a.d_ff;
  spec.num_experts = a.experts;
  spec.moe = a.moe;
  spec.filler_dims = a.filler_dims;
  spec.filler_vocab = a.filler_vocab;
  spec.sequence_length = a.length;
  spec.instances_per_class = a.instances;
  spec.strength = a.strength;
  spec.model_seed = a.model_seed;
  if (!(a.strength > 0.0 && a.strength <= 1.0)) {
    throw ms::ConfigError("signal strength must lie in (0, 1]");
  }
  int next_expert = 0;
  json fn_config = json::array();
  for (const std::string& item : a.functions) {
    const auto colon = item.find(':');
    if (colon == std::string::npos || colon == 0) {
      throw ms::ConfigError("function spec '" + item + "' must look like name:count");
    }
    const std::string name = item.substr(0, colon);
    int count = 0;
    try {
      count = std::stoi(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw ms::ConfigError("bad count in function spec '" + item + "'");
    }
    std::vector<int> experts;
    for (int i = 0; i < a.experts_per_function; ++i) experts.push_back(next_expert++);
    if (next_expert > a.experts) throw ms::ConfigError("not enough experts for all functions");
    ms::PlantConcentrated(spec, name, ms::FunctionCategory::kCustom, count,
                          a.neurons_per_sub, experts);
    fn_config.push_back(item);
  }
  spec.Validate();
  config.update({{"d_ff", a.d_ff}, {"experts", a.experts}, {"moe", a.moe},
                 {"layers", a.layers}, {"planted_layer", a.planted_layer},
                 {"functions", fn_config}, {"neurons_per_sub", a.neurons_per_sub},
                 {"experts_per_function", a.experts_per_function},
                 {"strength", a.strength}, {"instances", a.instances},
                 {"length", a.length}, {"filler_dims", a.filler_dims},
                 {"filler_vocab", a.filler_vocab}, {"model_seed", a.model_seed}});
  ms::ReportWriter writer(common.out, "synth", config);
  const ms::PlantedSuite planted = ms::SynthPlantedSuite(spec, a.seed);
  const ms::Model model = ms::BuildPlantedModel(spec);
  writer.Write("suite.jsonl", ms::SerializeSuite(planted.suite));
  writer.Write("model.ckpt", ms::EncodeCheckpoint(model));
  json truth = {{"layer", planted.truth.layer},
                {"neurons", planted.truth.neurons},
                {"experts", planted.truth.experts}};
  writer.WriteJson("truth.json", truth);
  ms::Partition blocks;
  blocks.provenance = "block";
  blocks.layers.push_back(ms::BlockPartition(spec.planted_layer, spec.d_ff, spec.num_experts));
  writer.Write("partition.csv", ms::SerializePartition(blocks));
  writer.Finish();
  return 0;
}

// ---- train -----------------------------------------------------------------

struct TrainArgs {
  std::string corpus;
  std::string init;
  ms::ModelConfig model;
  std::vector<int> moe_layers;
  bool attention = false;
  std::uint64_t model_seed = 0;
  ms::TrainConfig train;
};

int RunTrain(const Common& common, TrainArgs a) {
  a.train.Validate();
  if (a.init.empty()) {
    a.model.moe_layers = a.moe_layers;
    a.model.mixing = a.attention ? ms::Mixing::kAttention : ms::Mixing::kIdentity;
    a.model.Validate();
  }
  json config = {{"corpus", a.corpus},
                 {"init", a.init},
                 {"steps", a.train.steps},
                 {"batch_size", a.train.batch_size},
                 {"learning_rate", a.train.learning_rate},
                 {"mask_probability", a.train.mask_probability},
                 {"checkpoint_every", a.train.checkpoint_every},
                 {"seed", a.train.seed},
                 {"mask_token", a.train.mask_token},
                 {"final_lr_fraction", a.train.final_lr_fraction}};
  if (a.init.empty()) {
    config["model"] = ms::ConfigToJson(a.model);
    config["model_seed"] = a.model_seed;
  }
  ms::ReportWriter writer(common.out, "train", config);
  writer.AddInput(a.corpus);
  ms::Model model;
  if (!a.init.empty()) {
    writer.AddInput(a.init);
    model = ms::LoadCheckpoint(a.init).model;
  } else {
    model = ms::InitModel(a.model, a.model_seed);
  }
  const auto corpus = ms::LoadCorpus(a.corpus);
  a.train.threads = common.threads;
  ms::TrainResult result =
      ms::Train(std::move(model), corpus, a.train, [&](std::int64_t step, const ms::Model& m) {
        char name[32];
        std::snprintf(name, sizeof(name), "step_%08lld.ckpt", static_cast<long long>(step));
        writer.Write(name, ms::EncodeCheckpoint(m, {step}));
      });
  writer.Write("train_log.csv", ms::TrainLogToCsv(result));
  writer.Finish();
  return 0;
}

// ---- predictivity ------------------------------------------------------------

struct PredictivityArgs {
  std::string model;
  std::string suite;
  std::vector<std::string> records;
  std::vector<int> layers;
};

int RunPredictivity(const Common& common, const PredictivityArgs& a) {
  if (a.layers.empty()) throw ms::ConfigError("--layers is required");
  if (a.model.empty() == a.records.empty()) {
    throw ms::ConfigError("give exactly one of --model or --records");
  }
  if (a.suite.empty()) throw ms::ConfigError("--suite is required");
  ms::ReportWriter writer(common.out, "predictivity",
                          {{"model", a.model}, {"records", a.records}, {"suite", a.suite},
                           {"layers", a.layers}});
  writer.AddInput(a.suite);
  const ms::FunctionSuite suite = ms::LoadSuite(a.suite);
  ms::PredictivityTable table;
  if (!a.model.empty()) {
    writer.AddInput(a.model);
    const ms::Model model = ms::LoadCheckpoint(a.model).model;
    table = ms::BuildTable(model, suite, a.layers, {common.threads, {}});
  } else {
    std::vector<ms::ActivationRecord> records;
    for (const auto& path : a.records) {
      writer.AddInput(path);
      records.push_back(ms::LoadActivationRecord(path));
    }
    const auto ids = SubFunctionIds(suite);
    table = ms::BuildTableFromRecords(records, ids, a.layers);
  }
  writer.Write("predictivity.csv", ms::TableToCsv(table));
  writer.Write("predictivity.mspt", ms::EncodeTable(table));
  writer.Finish();
  return 0;
}

// ---- specialize --------------------------------------------------------------

struct TableArgs {
  std::string table;
  std::string suite;
  double fraction = 0.01;
};

int RunSpecialize(const Common& common, const TableArgs& a) {
  CheckFraction(a.fraction);
  ms::ReportWriter writer(common.out, "specialize",
                          {{"table", a.table}, {"suite", a.suite}, {"fraction", a.fraction}});
  writer.AddInput(a.table);
  writer.AddInput(a.suite);
  const auto table = ms::DecodeTable(ms::ReadFileBytes(a.table));
  const auto suite = ms::LoadSuite(a.suite);
  const auto summary = ms::SummarizeSpecialization(table, suite, a.fraction);
  writer.Write("similarity.csv", ms::SimilarityToCsv(summary));
  writer.Write("best_predictivity.csv", ms::BestPredictivityToCsv(summary.best));
  writer.WriteJson("plot_data.json", ms::SpecializationPlotData(summary));
  writer.Finish();
  return 0;
}

// ---- experts -----------------------------------------------------------------

struct PartitionArgs {
  std::string partition;
  std::string mode;  // pre, cluster, random, block
  std::string model;
  int experts = 16;
  std::uint64_t seed = 0;
};

void CheckPartitionArgs(const PartitionArgs& p) {
  if (!p.partition.empty() && !p.mode.empty()) {
    throw ms::ConfigError("give either --partition or --partition-mode, not both");
  }
  if (p.partition.empty() && p.mode.empty()) {
    throw ms::ConfigError("a partition is required (--partition or --partition-mode)");
  }
  if (!p.mode.empty() && p.mode != "pre" && p.mode != "cluster" && p.mode != "random" &&
      p.mode != "block") {
    throw ms::ConfigError("--partition-mode must be pre, cluster, random or block");
  }
  if ((p.mode == "pre" || p.mode == "cluster") && p.model.empty()) {
    throw ms::ConfigError("--partition-mode " + p.mode + " needs --model");
  }
  if (p.experts < 1) throw ms::ConfigError("--experts must be positive");
}

ms::Partition ResolvePartition(const PartitionArgs& p, const ms::PredictivityTable& table,
                               ms::ReportWriter& writer) {
  if (!p.partition.empty()) {
    writer.AddInput(p.partition);
    return ms::LoadPartition(p.partition);
  }
  ms::Partition partition;
  partition.provenance = p.mode;
  if (p.mode == "pre" || p.mode == "cluster") {
    writer.AddInput(p.model);
    const ms::Model model = ms::LoadCheckpoint(p.model).model;
    if (p.mode == "pre") return ms::PreMoePartition(model);
    for (int layer : table.layers) {
      partition.layers.push_back(ms::ClusterPartition(model, layer, p.experts, p.seed).partition);
    }
    return partition;
  }
  for (int layer : table.layers) {
    partition.layers.push_back(
        p.mode == "block"
            ? ms::BlockPartition(layer, table.d_ff, p.experts)
            : ms::RandomPartition(layer, table.d_ff, p.experts, p.seed + layer));
  }
  return partition;
}

json PartitionConfig(const PartitionArgs& p) {
  return {{"partition", p.partition}, {"partition_mode", p.mode}, {"model", p.model},
          {"experts", p.experts}, {"partition_seed", p.seed}};
}

struct ExpertsArgs {
  TableArgs table;
  PartitionArgs partition;
  double alpha = 0.001;
  std::string null_mode = "binomial";
  std::string label;
};

int RunExperts(const Common& common, const ExpertsArgs& a) {
  ms::DetectOptions options;
  options.fraction = a.table.fraction;
  options.alpha = a.alpha;
  CheckFraction(options.fraction);
  CheckAlpha(options.alpha);
  options.mode = ParseNull(a.null_mode);
  CheckPartitionArgs(a.partition);
  json config = PartitionConfig(a.partition);
  config.update({{"table", a.table.table}, {"suite", a.table.suite},
                 {"fraction", options.fraction}, {"alpha", options.alpha},
                 {"null", a.null_mode}, {"label", a.label}});
  ms::ReportWriter writer(common.out, "experts", config);
  writer.AddInput(a.table.table);
  writer.AddInput(a.table.suite);
  const auto table = ms::DecodeTable(ms::ReadFileBytes(a.table.table));
  const auto suite = ms::LoadSuite(a.table.suite);
  const ms::Partition partition = ResolvePartition(a.partition, table, writer);
  const std::string label =
      !a.label.empty() ? a.label
                       : (!a.partition.mode.empty() ? a.partition.mode : "given");
  const auto report = ms::DetectFunctionalExperts(table, partition, suite, options);
  writer.Write("experts.csv", ms::ReportToCsv(report, label));
  writer.Write("expert_tests.csv", ms::ExpertTestsToCsv(report));
  writer.Write("sub_functional.csv",
               ms::SubFunctionalToCsv(
                   ms::SummarizeSubFunctionalExperts(table, partition, suite, options), label));
  writer.Write("partition.csv", ms::SerializePartition(partition));
  writer.Finish();
  return 0;
}

// ---- perturb -----------------------------------------------------------------

struct PerturbArgs {
  std::string model;
  std::string suite;
  std::string plan;
  std::string table;
  std::string partition;
  std::vector<std::string> seen;
  std::vector<std::string> eval;
  std::vector<double> proportions;
  int seeds = 5;
  int runs = 5;
  std::uint64_t seed = 0;
};

int RunPerturb(const Common& common, const PerturbArgs& a) {
  if (a.seeds < 1 || a.runs < 1) throw ms::ConfigError("--seeds and --runs must be positive");
  for (double p : a.proportions) {
    if (!(p >= 0.0 && p <= 1.0)) throw ms::ConfigError("proportions must lie in [0, 1]");
  }
  json config = {{"model", a.model}, {"suite", a.suite}, {"plan", a.plan},
                 {"table", a.table}, {"partition", a.partition}, {"seen", a.seen},
                 {"eval", a.eval}, {"proportions", a.proportions}, {"seeds", a.seeds},
                 {"runs", a.runs}, {"seed", a.seed}};
  const ms::PerturbationPlan base = ms::LoadPlan(a.plan);
  const bool ranked = base.mode == ms::PerturbationMode::kNoise && base.targets.empty();
  if (ranked) {
    if (a.proportions.empty()) throw ms::ConfigError("a plan without targets needs --proportions");
    if (base.layers.empty()) throw ms::ConfigError("a plan without targets needs layers");
    if (base.ranking_basis != ms::RankingBasis::kRandom && (a.table.empty() || a.seen.empty())) {
      throw ms::ConfigError("ranked plans need --table and --seen");
    }
    if (base.ranking_basis == ms::RankingBasis::kExpertSum && a.partition.empty()) {
      throw ms::ConfigError("expert_sum ranking needs --partition");
    }
  }
  config["plan_content"] = ms::PlanToJson(base);
  ms::ReportWriter writer(common.out, "perturb", config);
  writer.AddInput(a.model);
  writer.AddInput(a.suite);
  writer.AddInput(a.plan);
  const ms::Model model = ms::LoadCheckpoint(a.model).model;
  base.Validate(&model.config);
  const ms::FunctionSuite suite = ms::LoadSuite(a.suite);
  std::vector<const ms::SubFunctionDataset*> eval;
  if (a.eval.empty()) {
    for (const auto& sf : suite.sub_functions) eval.push_back(&sf);
  } else {
    for (const auto& id : a.eval) {
      const int index = suite.IndexOf(id);
      if (index < 0) throw ms::ValidationError("unknown sub-function '" + id + "'");
      eval.push_back(&suite.sub_functions[index]);
    }
  }
  std::vector<ms::Readout> readouts;
  for (const auto* d : eval) readouts.push_back(ms::TrainReadout(model, *d));

  auto accuracy = [&](const ms::PerturbationPlan* plan, std::uint64_t seed) {
    double total = 0.0;
    for (std::size_t i = 0; i < eval.size(); ++i) {
      total += plan == nullptr || plan->mode == ms::PerturbationMode::kRouteRestrict
                   ? ms::EvaluateAccuracy(model, *eval[i], readouts[i], plan, seed,
                                          common.threads)
                   : ms::MeanPerturbedAccuracy(model, *eval[i], readouts[i], *plan,
                                               seed, a.runs, common.threads);
    }
    return total / eval.size();
  };

  std::vector<ms::PerturbationResult> results;
  results.push_back({"clean", 0.0, a.seed, accuracy(nullptr, a.seed)});
  std::string file;
  if (base.mode == ms::PerturbationMode::kRouteRestrict) {
    file = "pre_moe_route_restrict.csv";
    results.push_back({"restricted", 0.0, a.seed, accuracy(&base, a.seed)});
  } else if (!ranked) {
    file = "post_moe_noise.csv";
    for (int s = 0; s < a.seeds; ++s) {
      results.push_back({"targets", 0.0, a.seed + s, accuracy(&base, a.seed + s)});
    }
  } else {
    file = "post_moe_noise.csv";
    ms::PredictivityTable table;
    if (!a.table.empty()) {
      writer.AddInput(a.table);
      table = ms::DecodeTable(ms::ReadFileBytes(a.table));
    } else {
      table.d_ff = model.config.d_ff;
    }
    ms::Partition partition;
    if (!a.partition.empty()) {
      writer.AddInput(a.partition);
      partition = ms::LoadPartition(a.partition);
    }
    const ms::Partition* pp = a.partition.empty() ? nullptr : &partition;
    for (double p : a.proportions) {
      for (int s = 0; s < a.seeds; ++s) {
        const auto plan = ms::BuildNoisePlan(table, a.seen, pp, base.layers, p,
                                             base.ranking_basis, a.seed + s,
                                             base.noise_variance);
        results.push_back({std::string(ms::BasisName(base.ranking_basis)), p, a.seed + s,
                           accuracy(&plan, a.seed + s)});
      }
    }
  }
  writer.Write(file, ms::ResultsToCsv(results));
  writer.Finish();
  return 0;
}

// ---- dynamics ----------------------------------------------------------------

struct DynamicsArgs {
  std::string series;
  std::string suite;
  std::string partition;
  std::vector<int> layers;
  int experts = 16;
  double fraction = 0.01;
  double alpha = 0.001;
  std::string null_mode = "binomial";
  int draws = 1000;
  std::uint64_t seed = 0;
};

int RunDynamics(const Common& common, const DynamicsArgs& a) {
  CheckFraction(a.fraction);
  CheckAlpha(a.alpha);
  if (a.layers.empty()) throw ms::ConfigError("--layers is required");
  if (a.experts < 1 || a.draws < 0) throw ms::ConfigError("invalid --experts or --draws");
  ms::EmergenceOptions emergence;
  emergence.detect.fraction = a.fraction;
  emergence.detect.alpha = a.alpha;
  emergence.detect.mode = ParseNull(a.null_mode);
  emergence.random_draws = a.draws;
  emergence.seed = a.seed;
  ms::ReportWriter writer(common.out, "dynamics",
                          {{"series", a.series}, {"suite", a.suite},
                           {"partition", a.partition}, {"layers", a.layers},
                           {"experts", a.experts}, {"fraction", a.fraction},
                           {"alpha", a.alpha}, {"null", a.null_mode},
                           {"draws", a.draws}, {"seed", a.seed}});
  writer.AddInput(a.suite);
  const ms::CheckpointSeries series = ms::ScanSeries(a.series);
  for (const auto& entry : series.entries) writer.AddInput(entry.path);
  const ms::FunctionSuite suite = ms::LoadSuite(a.suite);
  const ms::SeriesTables tables =
      ms::BuildSeriesTables(series, suite, a.layers, {common.threads, {}});
  ms::Partition partition;
  if (!a.partition.empty()) {
    writer.AddInput(a.partition);
    partition = ms::LoadPartition(a.partition);
  } else {
    const ms::Model last = ms::LoadCheckpoint(series.entries.back().path).model;
    if (last.config.HasMoeLayers()) {
      partition = ms::PreMoePartition(last);
    } else {
      partition.provenance = "cluster of step " + std::to_string(series.entries.back().step);
      for (int layer : a.layers) {
        partition.layers.push_back(ms::ClusterPartition(last, layer, a.experts, a.seed).partition);
      }
    }
  }
  ms::StabilizationOptions stab;
  stab.baseline_draws = a.draws;
  stab.seed = a.seed;
  auto curve = ms::StabilizationCurve(tables, suite, ms::Level::kNeuron, nullptr, stab);
  const auto experts = ms::StabilizationCurve(tables, suite, ms::Level::kExpert, &partition, stab);
  curve.insert(curve.end(), experts.begin(), experts.end());
  const auto emerge = ms::EmergenceCurve(tables, suite, partition, emergence);
  writer.Write("stabilization.csv", ms::StabilizationToCsv(curve));
  writer.Write("emergence.csv", ms::EmergenceToCsv(emerge));
  writer.WriteJson("plot_data.json", ms::DynamicsPlotData(curve, emerge));
  writer.Write("partition.csv", ms::SerializePartition(partition));
  writer.Finish();
  return 0;
}

// ---- cluster-score -----------------------------------------------------------

struct ClusterScoreArgs {
  std::string table;
  std::string partition;
  std::string similarity;
  int max_k = 3;
  bool include_self = false;
};

int RunClusterScore(const Common& common, const ClusterScoreArgs& a) {
  if (a.max_k < 1) throw ms::ConfigError("--max-k must be >= 1");
  ms::ReportWriter writer(common.out, "cluster-score",
                          {{"table", a.table}, {"partition", a.partition},
                           {"similarity", a.similarity}, {"max_k", a.max_k},
                           {"include_self", a.include_self}});
  writer.AddInput(a.table);
  writer.AddInput(a.partition);
  writer.AddInput(a.similarity);
  const auto table = ms::DecodeTable(ms::ReadFileBytes(a.table));
  const auto partition = ms::LoadPartition(a.partition);
  const ms::Matrix s = ms::LoadSimilarity(a.similarity, table.sub_functions);
  const auto experts = ms::ExpertPredictivity(table, partition);
  const auto report = ms::ClusteringScoreByLayer(experts, s, a.max_k, !a.include_self);
  writer.Write("clustering_score.csv", ms::ClusteringToCsv(report));
  writer.Finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"modscope: functional specialization and modularity analysis"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--out", common.out, "Output directory")->required();
    cmd->add_option("--threads", common.threads, "Worker threads (default MODSCOPE_THREADS)");
  };

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate planted fixtures or a topic corpus");
  add_common(synth_cmd);
  synth_cmd->add_option("--kind", synth.kind, "planted or corpus");
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->add_option("--d-ff", synth.d_ff);
  synth_cmd->add_option("--experts", synth.experts);
  synth_cmd->add_flag("--moe", synth.moe, "Make the planted layer a top-1 MoE layer");
  synth_cmd->add_option("--layers", synth.layers);
  synth_cmd->add_option("--planted-layer", synth.planted_layer);
  synth_cmd->add_option("--functions", synth.functions, "name:count items")->delimiter(',');
  synth_cmd->add_option("--neurons-per-sub", synth.neurons_per_sub);
  synth_cmd->add_option("--experts-per-function", synth.experts_per_function);
  synth_cmd->add_option("--strength", synth.strength);
  synth_cmd->add_option("--instances", synth.instances, "Instances per class");
  synth_cmd->add_option("--length", synth.length);
  synth_cmd->add_option("--filler-dims", synth.filler_dims);
  synth_cmd->add_option("--filler-vocab", synth.filler_vocab);
  synth_cmd->add_option("--model-seed", synth.model_seed);
  synth_cmd->add_option("--topics", synth.corpus.num_topics);
  synth_cmd->add_option("--tokens-per-topic", synth.corpus.tokens_per_topic);
  synth_cmd->add_option("--shared-tokens", synth.corpus.shared_tokens);
  synth_cmd->add_option("--sequence-length", synth.corpus.sequence_length);
  synth_cmd->add_option("--sequences", synth.corpus.num_sequences);
  synth_cmd->add_option("--purity", synth.corpus.topic_purity);
  synth_cmd->add_option("--topics-per-function", synth.corpus.topics_per_function);
  synth_cmd->add_option("--probe-instances", synth.corpus.instances_per_class);

  TrainArgs train;
  train.model.vocab_size = 0;
  train.model.d_model = 32;
  train.model.d_ff = 128;
  auto* train_cmd = app.add_subcommand("train", "Masked-token training of a toy model");
  add_common(train_cmd);
  train_cmd->add_option("--corpus", train.corpus)->required();
  train_cmd->add_option("--init", train.init, "Start from this checkpoint");
  train_cmd->add_option("--vocab", train.model.vocab_size);
  train_cmd->add_option("--num-layers", train.model.num_layers);
  train_cmd->add_option("--d-model", train.model.d_model);
  train_cmd->add_option("--d-ff", train.model.d_ff);
  train_cmd->add_option("--experts", train.model.num_experts);
  train_cmd->add_option("--moe-layers", train.moe_layers)->delimiter(',');
  train_cmd->add_option("--top-k", train.model.top_k);
  train_cmd->add_flag("--attention", train.attention);
  train_cmd->add_option("--heads", train.model.num_heads);
  train_cmd->add_option("--model-seed", train.model_seed);
  train_cmd->add_option("--steps", train.train.steps);
  train_cmd->add_option("--batch-size", train.train.batch_size);
  train_cmd->add_option("--lr", train.train.learning_rate);
  train_cmd->add_option("--mask-prob", train.train.mask_probability);
  train_cmd->add_option("--every", train.train.checkpoint_every);
  train_cmd->add_option("--seed", train.train.seed);
  train_cmd->add_option("--mask-token", train.train.mask_token);
  train_cmd->add_option("--final-lr-fraction", train.train.final_lr_fraction);

  PredictivityArgs pred;
  auto* pred_cmd = app.add_subcommand("predictivity", "Per-neuron predictivity table");
  add_common(pred_cmd);
  pred_cmd->add_option("--model", pred.model);
  pred_cmd->add_option("--records", pred.records, "Activation record files");
  pred_cmd->add_option("--suite", pred.suite);
  pred_cmd->add_option("--layers", pred.layers)->delimiter(',');

  TableArgs spec;
  auto* spec_cmd = app.add_subcommand("specialize", "Function similarity and best predictivity");
  add_common(spec_cmd);
  spec_cmd->add_option("--table", spec.table)->required();
  spec_cmd->add_option("--suite", spec.suite)->required();
  spec_cmd->add_option("--fraction", spec.fraction);

  ExpertsArgs experts;
  auto* experts_cmd = app.add_subcommand("experts", "Detect functional experts");
  add_common(experts_cmd);
  experts_cmd->add_option("--table", experts.table.table)->required();
  experts_cmd->add_option("--suite", experts.table.suite)->required();
  experts_cmd->add_option("--fraction", experts.table.fraction);
  experts_cmd->add_option("--alpha", experts.alpha);
  experts_cmd->add_option("--null", experts.null_mode, "binomial or exact");
  experts_cmd->add_option("--label", experts.label, "Partitioning column value");
  experts_cmd->add_option("--partition", experts.partition.partition);
  experts_cmd->add_option("--partition-mode", experts.partition.mode);
  experts_cmd->add_option("--model", experts.partition.model);
  experts_cmd->add_option("--experts", experts.partition.experts);
  experts_cmd->add_option("--partition-seed", experts.partition.seed);

  PerturbArgs perturb;
  auto* perturb_cmd = app.add_subcommand("perturb", "Noise or routing-restriction perturbation");
  add_common(perturb_cmd);
  perturb_cmd->add_option("--model", perturb.model)->required();
  perturb_cmd->add_option("--suite", perturb.suite)->required();
  perturb_cmd->add_option("--plan", perturb.plan)->required();
  perturb_cmd->add_option("--table", perturb.table);
  perturb_cmd->add_option("--partition", perturb.partition);
  perturb_cmd->add_option("--seen", perturb.seen)->delimiter(',');
  perturb_cmd->add_option("--eval", perturb.eval)->delimiter(',');
  perturb_cmd->add_option("--proportions", perturb.proportions)->delimiter(',');
  perturb_cmd->add_option("--seeds", perturb.seeds);
  perturb_cmd->add_option("--runs", perturb.runs, "Noise runs averaged per seed");
  perturb_cmd->add_option("--seed", perturb.seed);

  DynamicsArgs dyn;
  auto* dyn_cmd = app.add_subcommand("dynamics", "Stabilization and emergence curves");
  add_common(dyn_cmd);
  dyn_cmd->add_option("--series", dyn.series, "Directory of .ckpt files")->required();
  dyn_cmd->add_option("--suite", dyn.suite)->required();
  dyn_cmd->add_option("--partition", dyn.partition);
  dyn_cmd->add_option("--layers", dyn.layers)->delimiter(',');
  dyn_cmd->add_option("--experts", dyn.experts);
  dyn_cmd->add_option("--fraction", dyn.fraction);
  dyn_cmd->add_option("--alpha", dyn.alpha);
  dyn_cmd->add_option("--null", dyn.null_mode);
  dyn_cmd->add_option("--draws", dyn.draws);
  dyn_cmd->add_option("--seed", dyn.seed);

  ClusterScoreArgs cs;
  auto* cs_cmd = app.add_subcommand("cluster-score", "Similarity vs top-k expert overlap");
  add_common(cs_cmd);
  cs_cmd->add_option("--table", cs.table)->required();
  cs_cmd->add_option("--partition", cs.partition)->required();
  cs_cmd->add_option("--similarity", cs.similarity)->required();
  cs_cmd->add_option("--max-k", cs.max_k);
  cs_cmd->add_flag("--include-self", cs.include_self);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ms::ExitCode::kValidation);
  }

  try {
    if (*synth_cmd) return RunSynth(common, synth);
    if (*train_cmd) return RunTrain(common, train);
    if (*pred_cmd) return RunPredictivity(common, pred);
    if (*spec_cmd) return RunSpecialize(common, spec);
    if (*experts_cmd) return RunExperts(common, experts);
    if (*perturb_cmd) return RunPerturb(common, perturb);
    if (*dyn_cmd) return RunDynamics(common, dyn);
    if (*cs_cmd) return RunClusterScore(common, cs);
  } catch (const std::exception& e) {
    std::cerr << ms::ErrorReport(e).dump(2) << "\n";
    return ms::ExitCodeFor(e);
  }
  return 0;
}
