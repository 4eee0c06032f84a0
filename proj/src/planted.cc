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

#include "modscope/planted.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "modscope/errors.h"

namespace modscope {

void PlantedSpec::Validate() const {
  if (!(strength > 0.0 && strength <= 1.0)) {
    throw ConfigError("signal strength must lie in (0, 1]");
  }
  if (num_layers < 1 || planted_layer < 0 || planted_layer >= num_layers) {
    throw ConfigError("planted layer out of range");
  }
  if (d_ff < 1 || filler_dims < 1 || filler_vocab < 1) {
    throw ConfigError("d_ff, filler_dims and filler_vocab must be positive");
  }
  if (sequence_length < 3) throw ConfigError("sequence_length must be >= 3");
  if (instances_per_class < 1) throw ConfigError("instances_per_class must be >= 1");
  if (num_experts < 1 || d_ff % num_experts != 0) {
    throw ConfigError("num_experts must divide d_ff");
  }
  if (sub_functions.empty()) throw ConfigError("no planted sub-functions");
  std::set<std::string> ids;
  for (const auto& sf : sub_functions) {
    if (!ids.insert(sf.id).second) throw ConfigError("duplicate id '" + sf.id + "'");
    if (sf.neurons.empty()) {
      throw ConfigError("sub-function '" + sf.id + "' has no planted neurons");
    }
    for (int n : sf.neurons) {
      if (n < 0 || n >= d_ff) throw ConfigError("planted neuron out of range");
    }
  }
}

PlantedGroundTruth GroundTruth(const PlantedSpec& spec) {
  spec.Validate();
  PlantedGroundTruth truth;
  truth.layer = spec.planted_layer;
  const int expert_size = spec.d_ff / spec.num_experts;
  for (const auto& sf : spec.sub_functions) {
    std::vector<int> neurons = sf.neurons;
    std::sort(neurons.begin(), neurons.end());
    neurons.erase(std::unique(neurons.begin(), neurons.end()), neurons.end());
    auto& experts = truth.experts[sf.function];
    for (int n : neurons) experts.push_back(n / expert_size);
    truth.neurons[sf.id] = std::move(neurons);
  }
  for (auto& [function, experts] : truth.experts) {
    std::sort(experts.begin(), experts.end());
    experts.erase(std::unique(experts.begin(), experts.end()), experts.end());
  }
  return truth;
}

PlantedSuite SynthPlantedSuite(const PlantedSpec& spec, std::uint64_t seed) {
  PlantedSuite out;
  out.truth = GroundTruth(spec);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> filler(spec.first_filler_token(),
                                            spec.first_filler_token() + spec.filler_vocab - 1);
  std::bernoulli_distribution agrees((1.0 + spec.strength) / 2.0);
  for (int s = 0; s < spec.num_signals(); ++s) {
    const PlantedSubFunction& planted = spec.sub_functions[s];
    SubFunctionDataset dataset{planted.id, planted.category, planted.function, {}};
    std::vector<int> labels;
    labels.insert(labels.end(), spec.instances_per_class, 1);
    labels.insert(labels.end(), spec.instances_per_class, 0);
    std::shuffle(labels.begin(), labels.end(), rng);
    for (int label : labels) {
      const bool positive_pattern = agrees(rng) ? label == 1 : label == 0;
      std::vector<int> tokens;
      if (positive_pattern) {
        tokens = {spec.positive_token(s), spec.pad_token()};
      } else {
        tokens = {spec.negative_a_token(s), spec.negative_b_token(s)};
      }
      while (static_cast<int>(tokens.size()) < spec.sequence_length) {
        tokens.push_back(filler(rng));
      }
      std::shuffle(tokens.begin(), tokens.end(), rng);
      dataset.instances.push_back({std::move(tokens), label});
    }
    out.suite.sub_functions.push_back(std::move(dataset));
  }
  return out;
}

Model BuildPlantedModel(const PlantedSpec& spec) {
  spec.Validate();
  const int signals = spec.num_signals();
  const int filler_start = 3 * signals;
  auto marker_a = [](int s) { return 2 * s; };
  auto marker_b = [](int s) { return 2 * s + 1; };
  auto readout = [signals](int s) { return 2 * signals + s; };

  ModelConfig config;
  config.vocab_size = spec.vocab_size();
  config.num_layers = spec.num_layers;
  config.d_model = spec.d_model();
  config.d_ff = spec.d_ff;
  config.mixing = Mixing::kIdentity;
  config.seed = spec.model_seed;
  if (spec.moe) {
    config.moe_layers = {spec.planted_layer};
    config.num_experts = spec.num_experts;
    config.top_k = 1;
  }
  config.Validate();

  std::mt19937_64 rng(spec.model_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double filler_scale = 1.0 / std::sqrt(static_cast<double>(spec.filler_dims));

  Model model;
  model.config = config;
  const int d = config.d_model;
  model.embedding = Matrix::Zero(config.vocab_size, d);
  for (int s = 0; s < signals; ++s) {
    model.embedding(spec.positive_token(s), marker_a(s)) = 1.0;
    model.embedding(spec.positive_token(s), marker_b(s)) = 1.0;
    model.embedding(spec.negative_a_token(s), marker_a(s)) = 1.0;
    model.embedding(spec.negative_b_token(s), marker_b(s)) = 1.0;
  }
  for (int t = spec.first_filler_token(); t < config.vocab_size; ++t) {
    for (int c = 0; c < spec.filler_dims; ++c) model.embedding(t, filler_start + c) = normal(rng);
  }
  model.lm_head = Matrix::Zero(config.vocab_size, d);

  // Planted neuron -> sub-functions it serves.
  std::vector<std::vector<int>> serves(spec.d_ff);
  for (int s = 0; s < signals; ++s) {
    for (int n : spec.sub_functions[s].neurons) serves[n].push_back(s);
  }

  model.layers.resize(config.num_layers);
  for (int l = 0; l < config.num_layers; ++l) {
    LayerWeights& w = model.layers[l];
    w.w_in = Matrix::Zero(config.d_ff, d);
    w.w_out = Matrix::Zero(d, config.d_ff);
    w.b_in = Vector::Zero(config.d_ff);
    w.b_out = Vector::Zero(d);
    for (int n = 0; n < config.d_ff; ++n) {
      const bool planted = l == spec.planted_layer && !serves[n].empty();
      if (planted) {
        for (int s : serves[n]) {
          w.w_in(n, marker_a(s)) += spec.gain;
          w.w_in(n, marker_b(s)) += spec.gain;
          w.w_out(readout(s), n) += spec.readout_gain;
        }
      } else {
        for (int c = 0; c < spec.filler_dims; ++c) {
          w.w_in(n, filler_start + c) = normal(rng) * filler_scale;
        }
        for (int c = 0; c < spec.filler_dims; ++c) {
          w.w_out(filler_start + c, n) =
              normal(rng) / std::sqrt(static_cast<double>(config.d_ff));
        }
      }
    }
    if (config.IsMoeLayer(l)) {
      w.gate = Matrix::Zero(config.num_experts, d);
      const int expert_size = config.ExpertSize();
      for (int e = 0; e < config.num_experts; ++e) {
        std::set<int> hosted;
        for (int n = e * expert_size; n < (e + 1) * expert_size; ++n) {
          hosted.insert(serves[n].begin(), serves[n].end());
        }
        if (hosted.empty()) {
          for (int c = 0; c < spec.filler_dims; ++c) {
            w.gate(e, filler_start + c) = normal(rng) * filler_scale;
          }
        }
        for (int s : hosted) {
          w.gate(e, marker_a(s)) += spec.router_gain;
          w.gate(e, marker_b(s)) += spec.router_gain;
        }
      }
    }
  }
  RoundToFloat(model);
  model.Validate();
  return model;
}

void PlantConcentrated(PlantedSpec& spec, const std::string& function,
                       FunctionCategory category, int count, int neurons_per_sub,
                       std::span<const int> experts) {
  if (count < 1 || neurons_per_sub < 1 || experts.empty()) {
    throw ConfigError("PlantConcentrated needs positive counts and experts");
  }
  if (spec.num_experts < 1 || spec.d_ff % spec.num_experts != 0) {
    throw ConfigError("num_experts must divide d_ff");
  }
  const int expert_size = spec.d_ff / spec.num_experts;
  std::set<int> used;
  for (const auto& sf : spec.sub_functions) used.insert(sf.neurons.begin(), sf.neurons.end());
  const int existing = static_cast<int>(spec.sub_functions.size());
  for (int i = 0; i < count; ++i) {
    const int expert = experts[i % experts.size()];
    if (expert < 0 || expert >= spec.num_experts) throw ConfigError("expert out of range");
    PlantedSubFunction sf;
    sf.id = function + "_" + std::to_string(existing + i);
    sf.function = function;
    sf.category = category;
    for (int n = expert * expert_size;
         n < (expert + 1) * expert_size && static_cast<int>(sf.neurons.size()) < neurons_per_sub;
         ++n) {
      if (used.insert(n).second) sf.neurons.push_back(n);
    }
    if (static_cast<int>(sf.neurons.size()) < neurons_per_sub) {
      throw ConfigError("expert " + std::to_string(expert) +
                        " has no room for more planted neurons");
    }
    spec.sub_functions.push_back(std::move(sf));
  }
}

void TopicCorpusSpec::Validate() const {
  if (num_topics < 2) throw ConfigError("num_topics must be >= 2");
  if (tokens_per_topic < 1 || shared_tokens < 0 || sequence_length < 1 ||
      num_sequences < 1 || instances_per_class < 1) {
    throw ConfigError("topic corpus sizes must be positive");
  }
  if (!(topic_purity > 0.0 && topic_purity <= 1.0)) {
    throw ConfigError("topic_purity must lie in (0, 1]");
  }
  if (shared_tokens == 0 && topic_purity < 1.0) {
    throw ConfigError("topic_purity below 1 needs shared tokens");
  }
  if (topics_per_function < 1) throw ConfigError("topics_per_function must be >= 1");
}

TopicCorpus SynthTopicCorpus(const TopicCorpusSpec& spec, std::uint64_t seed) {
  spec.Validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> topic_dist(0, spec.num_topics - 1);
  std::uniform_int_distribution<int> in_topic(0, spec.tokens_per_topic - 1);
  std::uniform_int_distribution<int> shared(0, std::max(0, spec.shared_tokens - 1));
  std::bernoulli_distribution pure(spec.topic_purity);
  const int first_topic_token = 1 + spec.shared_tokens;
  auto sequence = [&](int topic) {
    std::vector<int> tokens(spec.sequence_length);
    for (int& t : tokens) {
      t = pure(rng) ? first_topic_token + topic * spec.tokens_per_topic + in_topic(rng)
                    : 1 + shared(rng);
    }
    return tokens;
  };
  TopicCorpus corpus;
  for (int i = 0; i < spec.num_sequences; ++i) corpus.sequences.push_back(sequence(topic_dist(rng)));
  for (int topic = 0; topic < spec.num_topics; ++topic) {
    SubFunctionDataset dataset;
    dataset.id = "topic_" + std::to_string(topic);
    dataset.function = "group_" + std::to_string(topic / spec.topics_per_function);
    dataset.category = FunctionCategory::kCustom;
    std::vector<int> labels;
    labels.insert(labels.end(), spec.instances_per_class, 1);
    labels.insert(labels.end(), spec.instances_per_class, 0);
    std::shuffle(labels.begin(), labels.end(), rng);
    std::uniform_int_distribution<int> other(0, spec.num_topics - 2);
    for (int label : labels) {
      int source = topic;
      if (label == 0) {
        source = other(rng);
        if (source >= topic) ++source;
      }
      dataset.instances.push_back({sequence(source), label});
    }
    corpus.suite.sub_functions.push_back(std::move(dataset));
  }
  return corpus;
}

}  // namespace modscope
