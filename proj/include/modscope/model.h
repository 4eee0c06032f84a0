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

#ifndef MODSCOPE_MODEL_H_
#define MODSCOPE_MODEL_H_

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace modscope {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Token mixing applied before the feedforward sublayer of each layer.
enum class Mixing { kIdentity, kAttention };

struct ModelConfig {
  int vocab_size = 0;
  int num_layers = 1;
  int d_model = 0;
  int d_ff = 0;
  // Layers whose feedforward sublayer is a sparse mixture of experts.
  std::vector<int> moe_layers;
  int num_experts = 1;
  int top_k = 1;
  bool use_bias = false;
  // When false (the default) the analyzed neuron activation is sigma(W^I x)
  // even if the forward pass itself uses b^I.
  bool bias_in_activation = false;
  Mixing mixing = Mixing::kIdentity;
  int num_heads = 1;
  std::uint64_t seed = 0;
  // MoE layer -> experts the router may select. Absent or empty means all.
  std::map<int, std::vector<int>> allowed_experts;

  // Throws ConfigError on violated invariants.
  void Validate() const;
  bool IsMoeLayer(int layer) const;
  bool HasMoeLayers() const { return !moe_layers.empty(); }
  int ExpertSize() const { return d_ff / num_experts; }
  int ExpertOf(int neuron) const { return neuron / ExpertSize(); }
};

bool operator==(const ModelConfig& a, const ModelConfig& b);

struct LayerWeights {
  Matrix w_in;   // d_ff x d
  Matrix w_out;  // d x d_ff
  Vector b_in;   // d_ff, zero when biases are disabled
  Vector b_out;  // d
  Matrix gate;   // E x d on MoE layers, empty otherwise
  // d x d projections, empty under identity mixing.
  Matrix wq, wk, wv, wo;
};

struct Model {
  ModelConfig config;
  Matrix embedding;  // vocab x d
  Matrix lm_head;    // vocab x d, used only by the masked-token objective
  std::vector<LayerWeights> layers;

  // Shapes against config and finite entries. Throws ValidationError.
  void Validate() const;
};

// Seeded Gaussian initialization; every weight is representable as a 32-bit
// float so checkpoints round-trip exactly.
Model InitModel(const ModelConfig& config, std::uint64_t seed);

// Rounds every parameter to the nearest 32-bit float.
void RoundToFloat(Model& model);

struct NeuronRef {
  int layer = 0;
  int neuron = 0;

  friend bool operator==(const NeuronRef&, const NeuronRef&) = default;
  friend auto operator<=>(const NeuronRef&, const NeuronRef&) = default;
};

struct FfnOutput {
  Vector output;       // d
  Vector activations;  // d_ff, analyzed activations
};

struct MoeOutput {
  Vector output;       // d
  Vector activations;  // d_ff, recorded for every expert
  Vector gates;        // E, zero for unselected experts
};

// Called with the post-nonlinearity activations of one token before they are
// projected by W^O. The hook may modify them in place.
using ActivationHook =
    std::function<void(int layer, int position, Eigen::Ref<Vector> activations)>;

// Dense feedforward layer as a sum of per-neuron contributions.
FfnOutput FfnForward(const Model& model, int layer, const Vector& x);

// Softmax router with hard top-k; honours allowed_experts by renormalizing
// over the allowed set. Unselected entries are exactly zero.
Vector RouterGates(const Model& model, int layer, const Vector& x);

MoeOutput MoeForward(const Model& model, int layer, const Vector& x);

// Same as MoeForward with caller-supplied gate weights.
MoeOutput MoeForwardWithGates(const Model& model, int layer, const Vector& x,
                              const Vector& gates);

struct ForwardTrace {
  std::vector<Matrix> hidden_states;       // per layer, tokens x d FFN inputs
  std::vector<Matrix> neuron_activations;  // per layer, tokens x d_ff
  std::vector<Matrix> gate_weights;        // per layer, tokens x E or empty
  Matrix output;                           // tokens x d

  int num_tokens() const { return static_cast<int>(output.rows()); }
};

struct ForwardOptions {
  ActivationHook activation_hook;
};

// Embedding, then per layer: mixing + residual, FFN/MoE + residual.
// Throws ValidationError on out-of-vocabulary ids or empty input.
ForwardTrace EncoderForward(const Model& model, std::span<const int> tokens,
                            const ForwardOptions& options = {});

}  // namespace modscope

#endif  // MODSCOPE_MODEL_H_
