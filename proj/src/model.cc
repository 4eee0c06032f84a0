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

#include "modscope/model.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "forward_internal.h"
#include "modscope/errors.h"

namespace modscope {
namespace {

std::string LayerTag(int layer) { return "layer " + std::to_string(layer); }

void CheckShape(const Matrix& m, Eigen::Index rows, Eigen::Index cols,
                const std::string& what) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ValidationError(what + " has shape " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + ", expected " +
                          std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (!m.allFinite()) throw ValidationError(what + " has non-finite entries");
}

void FillGaussian(Matrix& m, Eigen::Index rows, Eigen::Index cols, double stddev,
                  std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  m.resize(rows, cols);
  // Row-major fill order keeps the stream layout independent of Eigen storage.
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  }
}

template <typename Derived>
void RoundInPlace(Eigen::MatrixBase<Derived>& m) {
  m = m.template cast<float>().template cast<double>();
}

double Relu(double v) { return v > 0.0 ? v : 0.0; }

void RowSoftmax(Eigen::Ref<Matrix> m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double top = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - top).exp();
    m.row(r) /= m.row(r).sum();
  }
}

void CheckLayer(const Model& model, int layer) {
  if (layer < 0 || layer >= model.config.num_layers) {
    throw ConfigError(LayerTag(layer) + " out of range");
  }
}

void CheckInput(const Model& model, const Vector& x) {
  if (x.size() != model.config.d_model) {
    throw ConfigError("input has dimension " + std::to_string(x.size()) +
                      ", expected " + std::to_string(model.config.d_model));
  }
}

// Pre-activation used by the forward pass and the analyzed activation.
struct NeuronValues {
  Vector used;
  Vector analyzed;
};

NeuronValues ComputeNeurons(const Model& model, int layer, const Vector& x) {
  const LayerWeights& w = model.layers[layer];
  Vector raw = w.w_in * x;
  NeuronValues values;
  if (model.config.use_bias) {
    values.used = (raw + w.b_in).unaryExpr(&Relu);
    values.analyzed =
        model.config.bias_in_activation ? values.used : raw.unaryExpr(&Relu);
  } else {
    values.used = raw.unaryExpr(&Relu);
    values.analyzed = values.used;
  }
  return values;
}

// Sum of neuron outputs: sum_i act_i * W^O[:, i] (+ b^O).
Vector NeuronSum(const Model& model, int layer, const Vector& activations) {
  const LayerWeights& w = model.layers[layer];
  Vector out = Vector::Zero(model.config.d_model);
  for (Eigen::Index i = 0; i < activations.size(); ++i) {
    if (activations[i] != 0.0) out.noalias() += activations[i] * w.w_out.col(i);
  }
  if (model.config.use_bias) out += w.b_out;
  return out;
}

// sum_{e,j} act_{e,j} alpha_e W^O[:, (e, j)] (+ b^O once).
Vector ExpertWeightedNeuronSum(const Model& model, int layer,
                               const Vector& activations, const Vector& gates) {
  const LayerWeights& w = model.layers[layer];
  const int expert_size = model.config.ExpertSize();
  Vector out = Vector::Zero(model.config.d_model);
  for (int e = 0; e < model.config.num_experts; ++e) {
    const double alpha = gates[e];
    if (alpha == 0.0) continue;
    for (int j = e * expert_size; j < (e + 1) * expert_size; ++j) {
      if (activations[j] != 0.0) {
        out.noalias() += (activations[j] * alpha) * w.w_out.col(j);
      }
    }
  }
  if (model.config.use_bias) out += w.b_out;
  return out;
}

}  // namespace

void ModelConfig::Validate() const {
  if (num_layers < 1) throw ConfigError("num_layers must be >= 1");
  if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (d_model < 1 || d_ff < 1) throw ConfigError("d_model and d_ff must be >= 1");
  for (size_t i = 0; i < moe_layers.size(); ++i) {
    if (moe_layers[i] < 0 || moe_layers[i] >= num_layers) {
      throw ConfigError("moe layer " + std::to_string(moe_layers[i]) +
                        " out of range");
    }
    if (i > 0 && moe_layers[i] <= moe_layers[i - 1]) {
      throw ConfigError("moe_layers must be strictly increasing");
    }
  }
  if (num_experts < 1) throw ConfigError("num_experts must be >= 1");
  if (HasMoeLayers()) {
    if (d_ff % num_experts != 0) {
      throw ConfigError("d_ff " + std::to_string(d_ff) +
                        " is not divisible by num_experts " +
                        std::to_string(num_experts));
    }
    if (top_k < 1 || top_k > num_experts) {
      throw ConfigError("top_k must lie in [1, num_experts]");
    }
  }
  if (mixing == Mixing::kAttention &&
      (num_heads < 1 || d_model % num_heads != 0)) {
    throw ConfigError("num_heads must divide d_model");
  }
  for (const auto& [layer, experts] : allowed_experts) {
    if (!IsMoeLayer(layer)) {
      throw ConfigError("routing restriction on non-MoE " + LayerTag(layer));
    }
    for (int e : experts) {
      if (e < 0 || e >= num_experts) {
        throw ConfigError("allowed expert " + std::to_string(e) + " out of range");
      }
    }
  }
}

bool ModelConfig::IsMoeLayer(int layer) const {
  return std::binary_search(moe_layers.begin(), moe_layers.end(), layer);
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.vocab_size == b.vocab_size && a.num_layers == b.num_layers &&
         a.d_model == b.d_model && a.d_ff == b.d_ff &&
         a.moe_layers == b.moe_layers && a.num_experts == b.num_experts &&
         a.top_k == b.top_k && a.use_bias == b.use_bias &&
         a.bias_in_activation == b.bias_in_activation && a.mixing == b.mixing &&
         a.num_heads == b.num_heads && a.seed == b.seed &&
         a.allowed_experts == b.allowed_experts;
}

void Model::Validate() const {
  config.Validate();
  const int d = config.d_model;
  CheckShape(embedding, config.vocab_size, d, "embedding");
  CheckShape(lm_head, config.vocab_size, d, "lm_head");
  if (static_cast<int>(layers.size()) != config.num_layers) {
    throw ValidationError("model has " + std::to_string(layers.size()) +
                          " layers, config says " +
                          std::to_string(config.num_layers));
  }
  for (int l = 0; l < config.num_layers; ++l) {
    const LayerWeights& w = layers[l];
    const std::string tag = LayerTag(l);
    CheckShape(w.w_in, config.d_ff, d, tag + " w_in");
    CheckShape(w.w_out, d, config.d_ff, tag + " w_out");
    CheckShape(w.b_in, config.d_ff, 1, tag + " b_in");
    CheckShape(w.b_out, d, 1, tag + " b_out");
    if (config.IsMoeLayer(l)) {
      CheckShape(w.gate, config.num_experts, d, tag + " gate");
    } else {
      CheckShape(w.gate, 0, 0, tag + " gate");
    }
    const Eigen::Index attn = config.mixing == Mixing::kAttention ? d : 0;
    CheckShape(w.wq, attn, attn, tag + " wq");
    CheckShape(w.wk, attn, attn, tag + " wk");
    CheckShape(w.wv, attn, attn, tag + " wv");
    CheckShape(w.wo, attn, attn, tag + " wo");
  }
}

Model InitModel(const ModelConfig& config, std::uint64_t seed) {
  config.Validate();
  Model model;
  model.config = config;
  model.config.seed = seed;
  std::mt19937_64 rng(seed);
  const int d = config.d_model;
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(d));
  FillGaussian(model.embedding, config.vocab_size, d, 1.0, rng);
  FillGaussian(model.lm_head, config.vocab_size, d, in_scale, rng);
  model.layers.resize(config.num_layers);
  for (int l = 0; l < config.num_layers; ++l) {
    LayerWeights& w = model.layers[l];
    if (config.mixing == Mixing::kAttention) {
      FillGaussian(w.wq, d, d, in_scale, rng);
      FillGaussian(w.wk, d, d, in_scale, rng);
      FillGaussian(w.wv, d, d, in_scale, rng);
      FillGaussian(w.wo, d, d, in_scale, rng);
    }
    FillGaussian(w.w_in, config.d_ff, d, in_scale, rng);
    FillGaussian(w.w_out, d, config.d_ff,
                 1.0 / std::sqrt(static_cast<double>(config.d_ff)), rng);
    w.b_in = Vector::Zero(config.d_ff);
    w.b_out = Vector::Zero(d);
    if (config.IsMoeLayer(l)) FillGaussian(w.gate, config.num_experts, d, in_scale, rng);
  }
  RoundToFloat(model);
  return model;
}

void RoundToFloat(Model& model) {
  RoundInPlace(model.embedding);
  RoundInPlace(model.lm_head);
  for (LayerWeights& w : model.layers) {
    for (Matrix* m : {&w.w_in, &w.w_out, &w.gate, &w.wq, &w.wk, &w.wv, &w.wo}) {
      RoundInPlace(*m);
    }
    RoundInPlace(w.b_in);
    RoundInPlace(w.b_out);
  }
}

FfnOutput FfnForward(const Model& model, int layer, const Vector& x) {
  CheckLayer(model, layer);
  CheckInput(model, x);
  if (model.config.IsMoeLayer(layer)) {
    throw ConfigError(LayerTag(layer) + " is a MoE layer; use MoeForward");
  }
  NeuronValues values = ComputeNeurons(model, layer, x);
  return {NeuronSum(model, layer, values.used), std::move(values.analyzed)};
}

Vector RouterGates(const Model& model, int layer, const Vector& x) {
  return internal::HardTopK(internal::RouterProbabilities(model, layer, x),
                            model.config.top_k);
}

MoeOutput MoeForward(const Model& model, int layer, const Vector& x) {
  CheckLayer(model, layer);
  CheckInput(model, x);
  if (!model.config.IsMoeLayer(layer)) {
    throw ConfigError(LayerTag(layer) + " is not a MoE layer");
  }
  return MoeForwardWithGates(model, layer, x, RouterGates(model, layer, x));
}

MoeOutput MoeForwardWithGates(const Model& model, int layer, const Vector& x,
                              const Vector& gates) {
  CheckLayer(model, layer);
  CheckInput(model, x);
  if (!model.config.IsMoeLayer(layer)) {
    throw ConfigError(LayerTag(layer) + " is not a MoE layer");
  }
  if (gates.size() != model.config.num_experts) {
    throw ConfigError("gate vector has " + std::to_string(gates.size()) +
                      " entries, expected " +
                      std::to_string(model.config.num_experts));
  }
  NeuronValues values = ComputeNeurons(model, layer, x);
  MoeOutput result;
  result.output = ExpertWeightedNeuronSum(model, layer, values.used, gates);
  result.activations = std::move(values.analyzed);
  result.gates = gates;
  return result;
}

ForwardTrace EncoderForward(const Model& model, std::span<const int> tokens,
                            const ForwardOptions& options) {
  return internal::RunForward(model, tokens, options, nullptr);
}

namespace internal {

Vector RouterProbabilities(const Model& model, int layer, const Vector& x) {
  const ModelConfig& config = model.config;
  const Vector logits = model.layers[layer].gate * x;
  std::vector<char> allowed(config.num_experts, 1);
  if (auto it = config.allowed_experts.find(layer);
      it != config.allowed_experts.end() && !it->second.empty()) {
    std::fill(allowed.begin(), allowed.end(), 0);
    for (int e : it->second) allowed[e] = 1;
  }
  double top = -std::numeric_limits<double>::infinity();
  for (int e = 0; e < config.num_experts; ++e) {
    if (allowed[e]) top = std::max(top, logits[e]);
  }
  Vector probs = Vector::Zero(config.num_experts);
  double total = 0.0;
  for (int e = 0; e < config.num_experts; ++e) {
    if (allowed[e]) {
      probs[e] = std::exp(logits[e] - top);
      total += probs[e];
    }
  }
  return probs / total;
}

Vector HardTopK(const Vector& probs, int top_k) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs[a] > probs[b]; });
  Vector gates = Vector::Zero(probs.size());
  for (int i = 0; i < top_k && i < static_cast<int>(order.size()); ++i) {
    // A zero probability marks a disallowed expert.
    if (probs[order[i]] > 0.0) gates[order[i]] = probs[order[i]];
  }
  return gates;
}

ForwardTrace RunForward(const Model& model, std::span<const int> tokens,
                        const ForwardOptions& options, ForwardCache* cache) {
  const ModelConfig& config = model.config;
  if (tokens.empty()) throw ValidationError("empty token sequence");
  for (int id : tokens) {
    if (id < 0 || id >= config.vocab_size) {
      throw ValidationError("token id " + std::to_string(id) +
                            " outside vocabulary of size " +
                            std::to_string(config.vocab_size));
    }
  }
  const int num_tokens = static_cast<int>(tokens.size());
  const int d = config.d_model;

  ForwardTrace trace;
  trace.hidden_states.resize(config.num_layers);
  trace.neuron_activations.resize(config.num_layers);
  trace.gate_weights.resize(config.num_layers);
  if (cache) cache->layers.assign(config.num_layers, LayerCache{});

  Matrix hidden(num_tokens, d);
  for (int t = 0; t < num_tokens; ++t) hidden.row(t) = model.embedding.row(tokens[t]);

  for (int l = 0; l < config.num_layers; ++l) {
    const LayerWeights& w = model.layers[l];
    LayerCache* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) lc->input = hidden;

    if (config.mixing == Mixing::kAttention) {
      const int heads = config.num_heads;
      const int head_dim = d / heads;
      const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
      Matrix q = hidden * w.wq.transpose();
      Matrix k = hidden * w.wk.transpose();
      Matrix v = hidden * w.wv.transpose();
      Matrix context(num_tokens, d);
      if (lc) lc->probs.resize(heads);
      for (int h = 0; h < heads; ++h) {
        const auto cols = Eigen::seqN(h * head_dim, head_dim);
        Matrix probs = q(Eigen::all, cols) * k(Eigen::all, cols).transpose() * scale;
        RowSoftmax(probs);
        context(Eigen::all, cols) = probs * v(Eigen::all, cols);
        if (lc) lc->probs[h] = std::move(probs);
      }
      hidden += context * w.wo.transpose();
      if (lc) {
        lc->q = std::move(q);
        lc->k = std::move(k);
        lc->v = std::move(v);
        lc->context = std::move(context);
      }
    }

    trace.hidden_states[l] = hidden;
    const bool moe = config.IsMoeLayer(l);
    Matrix analyzed(num_tokens, config.d_ff);
    Matrix gates_out;
    if (moe) gates_out.resize(num_tokens, config.num_experts);
    if (lc) {
      lc->ffn_input = hidden;
      lc->pre_activation.resize(num_tokens, config.d_ff);
      lc->activation.resize(num_tokens, config.d_ff);
      if (moe) {
        lc->router_probs.resize(num_tokens, config.num_experts);
        lc->gates.resize(num_tokens, config.num_experts);
      }
    }

    Matrix next = hidden;
    for (int t = 0; t < num_tokens; ++t) {
      const Vector x = hidden.row(t).transpose();
      NeuronValues values = ComputeNeurons(model, l, x);
      analyzed.row(t) = values.analyzed.transpose();
      if (options.activation_hook) options.activation_hook(l, t, values.used);
      Vector out;
      if (moe) {
        Vector probs = RouterProbabilities(model, l, x);
        Vector gates = HardTopK(probs, config.top_k);
        out = ExpertWeightedNeuronSum(model, l, values.used, gates);
        gates_out.row(t) = gates.transpose();
        if (lc) {
          lc->router_probs.row(t) = probs.transpose();
          lc->gates.row(t) = gates.transpose();
        }
      } else {
        out = NeuronSum(model, l, values.used);
      }
      if (lc) {
        Vector pre = w.w_in * x;
        if (config.use_bias) pre += w.b_in;
        lc->pre_activation.row(t) = pre.transpose();
        lc->activation.row(t) = values.used.transpose();
      }
      next.row(t) += out.transpose();
    }
    trace.neuron_activations[l] = std::move(analyzed);
    trace.gate_weights[l] = std::move(gates_out);
    hidden = std::move(next);
  }
  trace.output = std::move(hidden);
  return trace;
}

}  // namespace internal
}  // namespace modscope
