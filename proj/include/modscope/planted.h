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

#ifndef MODSCOPE_PLANTED_H_
#define MODSCOPE_PLANTED_H_

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "modscope/dataset.h"
#include "modscope/model.h"

namespace modscope {

// Synthetic sub-function/model pairs with known functional neurons.
//
// Each planted sub-function s owns two marker directions a_s, b_s and one
// readout direction r_s. Positive instances contain the token a_s + b_s (plus a
// zero pad token); negative instances contain the tokens a_s and b_s. The rest
// of every sequence is filler tokens living in a separate subspace, so the
// residual stream carries the same marker mass for both classes when pooled
// and only a neuron reading a_s + b_s separates them. A planted neuron of s
// reads a_s + b_s and writes r_s; every other neuron reads and writes filler
// dimensions only.
struct PlantedSubFunction {
  std::string id;
  std::string function;
  FunctionCategory category = FunctionCategory::kCustom;
  std::vector<int> neurons;  // planted neurons in the planted layer
};

struct PlantedSpec {
  int num_layers = 1;
  int planted_layer = 0;
  int d_ff = 64;
  // When moe is set the planted layer is a top-1 MoE layer with this many
  // experts, and the router sends a_s + b_s to the expert hosting s.
  int num_experts = 1;
  bool moe = false;
  int filler_dims = 16;
  int filler_vocab = 32;
  int sequence_length = 8;
  int instances_per_class = 100;
  // Probability that an instance's pattern agrees with its label is
  // (1 + strength) / 2.
  double strength = 1.0;
  double gain = 1.0;
  double readout_gain = 1.0;
  double router_gain = 3.0;
  std::uint64_t model_seed = 1;
  std::vector<PlantedSubFunction> sub_functions;

  void Validate() const;  // throws ConfigError
  int num_signals() const { return static_cast<int>(sub_functions.size()); }
  int d_model() const { return 3 * num_signals() + filler_dims; }
  int vocab_size() const { return 1 + 3 * num_signals() + filler_vocab; }
  int pad_token() const { return 0; }
  int positive_token(int s) const { return 1 + 3 * s; }
  int negative_a_token(int s) const { return 2 + 3 * s; }
  int negative_b_token(int s) const { return 3 + 3 * s; }
  int first_filler_token() const { return 1 + 3 * num_signals(); }
};

struct PlantedGroundTruth {
  int layer = 0;
  std::map<std::string, std::vector<int>> neurons;  // sub-function -> neurons
  // function -> experts hosting its planted neurons (block layout).
  std::map<std::string, std::vector<int>> experts;

  friend bool operator==(const PlantedGroundTruth&, const PlantedGroundTruth&) = default;
};

struct PlantedSuite {
  FunctionSuite suite;
  PlantedGroundTruth truth;
};

PlantedGroundTruth GroundTruth(const PlantedSpec& spec);

// Seeded instances for every planted sub-function. The ground truth depends on
// the spec only. Throws ConfigError when strength lies outside (0, 1].
PlantedSuite SynthPlantedSuite(const PlantedSpec& spec, std::uint64_t seed);

// Identity-mixing model realizing the planted construction.
Model BuildPlantedModel(const PlantedSpec& spec);

// Adds `count` sub-functions of `function`, each with `neurons_per_sub`
// distinct planted neurons taken from the blocks of `experts` (block layout
// with spec.num_experts experts). Sub-function i lives entirely in expert
// experts[i % experts.size()].
void PlantConcentrated(PlantedSpec& spec, const std::string& function,
                       FunctionCategory category, int count, int neurons_per_sub,
                       std::span<const int> experts);

// Topic-structured token corpus for masked-token training. Token 0 is unused,
// then come shared tokens, then num_topics blocks of topic tokens, and the last
// id is the mask token. Each sequence picks one topic and draws every token
// from it with probability topic_purity, otherwise from the shared tokens.
struct TopicCorpusSpec {
  int num_topics = 8;
  int tokens_per_topic = 8;
  int shared_tokens = 8;
  int sequence_length = 8;
  int num_sequences = 2000;
  double topic_purity = 0.8;
  // Probe suite: one sub-function per topic ("is this sequence on topic t"),
  // grouped into functions of topics_per_function consecutive topics.
  int topics_per_function = 2;
  int instances_per_class = 50;

  void Validate() const;  // throws ConfigError
  int vocab_size() const { return 1 + shared_tokens + num_topics * tokens_per_topic + 1; }
  int mask_token() const { return vocab_size() - 1; }
};

struct TopicCorpus {
  std::vector<std::vector<int>> sequences;
  FunctionSuite suite;
};

TopicCorpus SynthTopicCorpus(const TopicCorpusSpec& spec, std::uint64_t seed);

}  // namespace modscope

#endif  // MODSCOPE_PLANTED_H_
