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

#include "modscope/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <span>

#include "forward_internal.h"
#include "modscope/checkpoint.h"
#include "modscope/errors.h"
#include "modscope/parallel.h"

namespace modscope {
namespace {

std::vector<std::span<double>> Tensors(Model& model) {
  std::vector<std::span<double>> out;
  auto add = [&out](auto& tensor) { out.emplace_back(tensor.data(), tensor.size()); };
  add(model.embedding);
  add(model.lm_head);
  for (LayerWeights& w : model.layers) {
    add(w.w_in);
    add(w.w_out);
    add(w.b_in);
    add(w.b_out);
    add(w.gate);
    add(w.wq);
    add(w.wk);
    add(w.wv);
    add(w.wo);
  }
  return out;
}

void AddInto(Model& total, Model& part) {
  auto a = Tensors(total);
  auto b = Tensors(part);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  }
}

double LogSumExp(const Vector& v) {
  const double top = v.maxCoeff();
  return top + std::log((v.array() - top).exp().sum());
}

int TotalMasked(std::span<const MaskedSequence> batch) {
  int total = 0;
  for (const auto& seq : batch) {
    if (seq.positions.size() != seq.targets.size()) {
      throw ValidationError("masked positions and targets differ in length");
    }
    total += static_cast<int>(seq.positions.size());
  }
  if (total == 0) throw ValidationError("batch has no masked positions");
  return total;
}

// Loss contribution of one sequence plus its gradient, scaled by `weight`.
double SequenceGradient(const Model& model, const MaskedSequence& seq, double weight,
                        Model& grad, std::vector<std::vector<char>>& routed) {
  const ModelConfig& config = model.config;
  internal::ForwardCache cache;
  const ForwardTrace trace = internal::RunForward(model, seq.tokens, {}, &cache);
  const Matrix& hidden = trace.output;
  const int num_tokens = trace.num_tokens();
  const int d = config.d_model;

  double loss = 0.0;
  Matrix dh = Matrix::Zero(num_tokens, d);
  for (std::size_t m = 0; m < seq.positions.size(); ++m) {
    const int p = seq.positions[m];
    const Vector h = hidden.row(p).transpose();
    const Vector logits = model.lm_head * h;
    const double lse = LogSumExp(logits);
    loss += weight * (lse - logits[seq.targets[m]]);
    Vector dlogits = (logits.array() - lse).exp().matrix();
    dlogits[seq.targets[m]] -= 1.0;
    dlogits *= weight;
    grad.lm_head.noalias() += dlogits * h.transpose();
    dh.row(p).noalias() += (model.lm_head.transpose() * dlogits).transpose();
  }

  for (int l = config.num_layers - 1; l >= 0; --l) {
    const LayerWeights& w = model.layers[l];
    LayerWeights& gw = grad.layers[l];
    const internal::LayerCache& lc = cache.layers[l];
    const Matrix& x = lc.ffn_input;
    Matrix dx = dh;  // residual around the FFN
    if (config.use_bias) gw.b_out += dh.colwise().sum().transpose();
    Matrix dpre;
    if (config.IsMoeLayer(l)) {
      const int expert_size = config.ExpertSize();
      dpre = Matrix::Zero(num_tokens, config.d_ff);
      for (int t = 0; t < num_tokens; ++t) {
        const Vector dout = dh.row(t).transpose();
        Vector dgate = Vector::Zero(config.num_experts);
        for (int e = 0; e < config.num_experts; ++e) {
          const double alpha = lc.gates(t, e);
          if (alpha == 0.0) continue;
          routed[l][e] = 1;
          for (int j = e * expert_size; j < (e + 1) * expert_size; ++j) {
            const double act = lc.activation(t, j);
            const double wdot = w.w_out.col(j).dot(dout);
            if (act != 0.0) gw.w_out.col(j).noalias() += (alpha * act) * dout;
            dgate[e] += act * wdot;
            if (lc.pre_activation(t, j) > 0.0) dpre(t, j) = alpha * wdot;
          }
        }
        // Selected gates equal router probabilities; unselected ones are
        // constant zero under hard top-k.
        const Vector probs = lc.router_probs.row(t).transpose();
        const double mean = probs.dot(dgate);
        const Vector dz = probs.cwiseProduct((dgate.array() - mean).matrix());
        gw.gate.noalias() += dz * x.row(t);
        dx.row(t).noalias() += (w.gate.transpose() * dz).transpose();
      }
    } else {
      gw.w_out.noalias() += dh.transpose() * lc.activation;
      dpre = (dh * w.w_out).cwiseProduct(
          (lc.pre_activation.array() > 0.0).cast<double>().matrix());
    }
    gw.w_in.noalias() += dpre.transpose() * x;
    if (config.use_bias) gw.b_in += dpre.colwise().sum().transpose();
    dx.noalias() += dpre * w.w_in;

    if (config.mixing == Mixing::kAttention) {
      const int heads = config.num_heads;
      const int head_dim = d / heads;
      const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
      Matrix dinput = dx;
      gw.wo.noalias() += dx.transpose() * lc.context;
      const Matrix dcontext = dx * w.wo;
      Matrix dq = Matrix::Zero(num_tokens, d);
      Matrix dk = Matrix::Zero(num_tokens, d);
      Matrix dv = Matrix::Zero(num_tokens, d);
      for (int h = 0; h < heads; ++h) {
        const auto cols = Eigen::seqN(h * head_dim, head_dim);
        const Matrix& probs = lc.probs[h];
        const Matrix dc = dcontext(Eigen::all, cols);
        const Matrix dp = dc * lc.v(Eigen::all, cols).transpose();
        dv(Eigen::all, cols) = probs.transpose() * dc;
        const Vector row_dot = dp.cwiseProduct(probs).rowwise().sum();
        const Matrix ds = probs.cwiseProduct((dp.colwise() - row_dot));
        dq(Eigen::all, cols) = ds * lc.k(Eigen::all, cols) * scale;
        dk(Eigen::all, cols) = ds.transpose() * lc.q(Eigen::all, cols) * scale;
      }
      gw.wq.noalias() += dq.transpose() * lc.input;
      gw.wk.noalias() += dk.transpose() * lc.input;
      gw.wv.noalias() += dv.transpose() * lc.input;
      dinput.noalias() += dq * w.wq + dk * w.wk + dv * w.wv;
      dh = std::move(dinput);
    } else {
      dh = std::move(dx);
    }
  }
  for (int t = 0; t < num_tokens; ++t) grad.embedding.row(seq.tokens[t]) += dh.row(t);
  return loss;
}

// ReLU signs and expert selections of every token, for kink detection.
std::vector<char> Signature(const Model& model, std::span<const MaskedSequence> batch) {
  std::vector<char> sig;
  for (const auto& seq : batch) {
    internal::ForwardCache cache;
    internal::RunForward(model, seq.tokens, {}, &cache);
    for (const auto& lc : cache.layers) {
      for (Eigen::Index i = 0; i < lc.pre_activation.size(); ++i) {
        sig.push_back(lc.pre_activation.data()[i] > 0.0);
      }
      for (Eigen::Index i = 0; i < lc.gates.size(); ++i) {
        sig.push_back(lc.gates.data()[i] > 0.0);
      }
    }
  }
  return sig;
}

void ValidateCorpus(const std::vector<std::vector<int>>& corpus, int vocab_size) {
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].empty()) {
      throw ValidationError("corpus sequence " + std::to_string(i) + " is empty");
    }
    for (int id : corpus[i]) {
      if (id < 0 || id >= vocab_size) {
        throw ValidationError("corpus sequence " + std::to_string(i) + " has token " +
                              std::to_string(id) + " outside the vocabulary");
      }
    }
  }
}

}  // namespace

void TrainConfig::Validate() const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(mask_probability > 0.0 && mask_probability < 1.0)) {
    throw ConfigError("mask_probability must lie in (0, 1)");
  }
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive");
  if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) {
    throw ConfigError("final_lr_fraction must lie in (0, 1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0)) {
    throw ConfigError("invalid Adam hyperparameters");
  }
}

MaskedSequence MaskSequence(std::span<const int> tokens, double mask_probability,
                            int mask_token, std::mt19937_64& rng) {
  if (tokens.empty()) throw ValidationError("cannot mask an empty sequence");
  MaskedSequence seq;
  seq.tokens.assign(tokens.begin(), tokens.end());
  std::bernoulli_distribution mask(mask_probability);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (mask(rng)) seq.positions.push_back(static_cast<int>(i));
  }
  if (seq.positions.empty()) {
    std::uniform_int_distribution<int> pick(0, static_cast<int>(tokens.size()) - 1);
    seq.positions.push_back(pick(rng));
  }
  for (int p : seq.positions) {
    seq.targets.push_back(seq.tokens[p]);
    seq.tokens[p] = mask_token;
  }
  return seq;
}

Model ZeroLike(const Model& model) {
  Model zero = model;
  for (auto tensor : Tensors(zero)) std::fill(tensor.begin(), tensor.end(), 0.0);
  return zero;
}

double MaskedLoss(const Model& model, std::span<const MaskedSequence> batch) {
  const double weight = 1.0 / TotalMasked(batch);
  double loss = 0.0;
  for (const auto& seq : batch) {
    const ForwardTrace trace = EncoderForward(model, seq.tokens);
    for (std::size_t m = 0; m < seq.positions.size(); ++m) {
      const Vector logits = model.lm_head * trace.output.row(seq.positions[m]).transpose();
      loss += weight * (LogSumExp(logits) - logits[seq.targets[m]]);
    }
  }
  return loss;
}

double MaskedLossAndGradient(const Model& model, std::span<const MaskedSequence> batch,
                             Model* gradient, std::vector<std::vector<char>>* routed,
                             int threads) {
  const double weight = 1.0 / TotalMasked(batch);
  const int n = static_cast<int>(batch.size());
  std::vector<Model> parts(n);
  std::vector<double> losses(n, 0.0);
  std::vector<std::vector<std::vector<char>>> part_routed(n);
  ParallelFor(
      n,
      [&](int i) {
        parts[i] = ZeroLike(model);
        part_routed[i].assign(model.config.num_layers,
                              std::vector<char>(model.config.num_experts, 0));
        losses[i] = SequenceGradient(model, batch[i], weight, parts[i], part_routed[i]);
      },
      threads);
  *gradient = ZeroLike(model);
  if (routed != nullptr) {
    routed->assign(model.config.num_layers, std::vector<char>(model.config.num_experts, 0));
  }
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    AddInto(*gradient, parts[i]);
    loss += losses[i];
    if (routed != nullptr) {
      for (int l = 0; l < model.config.num_layers; ++l) {
        for (int e = 0; e < model.config.num_experts; ++e) {
          (*routed)[l][e] |= part_routed[i][l][e];
        }
      }
    }
  }
  return loss;
}

TrainResult Train(Model model, const std::vector<std::vector<int>>& corpus,
                  const TrainConfig& config, const CheckpointSink& sink) {
  config.Validate();
  model.Validate();
  const ModelConfig& mc = model.config;
  const int mask_token = config.mask_token < 0 ? mc.vocab_size - 1 : config.mask_token;
  if (mask_token >= mc.vocab_size) throw ConfigError("mask token outside the vocabulary");
  ValidateCorpus(corpus, mc.vocab_size);

  TrainResult result;
  auto save = [&](std::int64_t step) {
    result.checkpoint_steps.push_back(step);
    if (sink) sink(step, model);
  };
  save(0);

  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  Model m1 = ZeroLike(model);
  Model m2 = ZeroLike(model);
  for (int step = 1; step <= config.steps; ++step) {
    std::vector<MaskedSequence> batch;
    for (int b = 0; b < config.batch_size; ++b) {
      batch.push_back(MaskSequence(corpus[pick(rng)], config.mask_probability, mask_token, rng));
    }
    Model grad;
    std::vector<std::vector<char>> routed;
    const double loss = MaskedLossAndGradient(model, batch, &grad, &routed, config.threads);
    if (!std::isfinite(loss)) {
      throw ComputeError("training diverged at step " + std::to_string(step) +
                         " (loss " + std::to_string(loss) + ")");
    }
    result.log.emplace_back(step, loss);
    if (mc.HasMoeLayers()) result.routed.push_back(routed);

    // Untouched expert blocks keep parameters and optimizer state.
    struct Saved {
      int layer;
      Matrix w_in, w_out, m_in, m_out, v_in, v_out;
      Vector b_in, mb_in, vb_in;
    };
    std::vector<Saved> saved;
    for (int l : mc.moe_layers) {
      saved.push_back({l, model.layers[l].w_in, model.layers[l].w_out, m1.layers[l].w_in,
                       m1.layers[l].w_out, m2.layers[l].w_in, m2.layers[l].w_out,
                       model.layers[l].b_in, m1.layers[l].b_in, m2.layers[l].b_in});
    }

    const double progress =
        config.steps > 1 ? static_cast<double>(step - 1) / (config.steps - 1) : 0.0;
    const double lr =
        config.learning_rate * (1.0 - (1.0 - config.final_lr_fraction) * progress);
    const double c1 = 1.0 - std::pow(config.beta1, step);
    const double c2 = 1.0 - std::pow(config.beta2, step);
    auto params = Tensors(model);
    auto grads = Tensors(grad);
    auto first = Tensors(m1);
    auto second = Tensors(m2);
    for (std::size_t t = 0; t < params.size(); ++t) {
      for (std::size_t i = 0; i < params[t].size(); ++i) {
        const double g = grads[t][i];
        first[t][i] = config.beta1 * first[t][i] + (1.0 - config.beta1) * g;
        second[t][i] = config.beta2 * second[t][i] + (1.0 - config.beta2) * g * g;
        params[t][i] -= lr * (first[t][i] / c1) /
                        (std::sqrt(second[t][i] / c2) + config.epsilon);
      }
    }

    const int expert_size = mc.ExpertSize();
    for (const Saved& s : saved) {
      for (int e = 0; e < mc.num_experts; ++e) {
        if (routed[s.layer][e]) continue;
        const auto rows = Eigen::seqN(e * expert_size, expert_size);
        model.layers[s.layer].w_in(rows, Eigen::all) = s.w_in(rows, Eigen::all);
        model.layers[s.layer].w_out(Eigen::all, rows) = s.w_out(Eigen::all, rows);
        model.layers[s.layer].b_in(rows) = s.b_in(rows);
        m1.layers[s.layer].w_in(rows, Eigen::all) = s.m_in(rows, Eigen::all);
        m1.layers[s.layer].w_out(Eigen::all, rows) = s.m_out(Eigen::all, rows);
        m1.layers[s.layer].b_in(rows) = s.mb_in(rows);
        m2.layers[s.layer].w_in(rows, Eigen::all) = s.v_in(rows, Eigen::all);
        m2.layers[s.layer].w_out(Eigen::all, rows) = s.v_out(Eigen::all, rows);
        m2.layers[s.layer].b_in(rows) = s.vb_in(rows);
      }
    }
    RoundToFloat(model);
    if (step % config.checkpoint_every == 0 || step == config.steps) save(step);
  }
  result.model = std::move(model);
  return result;
}

TrainResult TrainToDirectory(Model model, const std::vector<std::vector<int>>& corpus,
                             const TrainConfig& config,
                             const std::filesystem::path& out_dir,
                             CheckpointSeries* series) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  CheckpointSeries written;
  TrainResult result = Train(std::move(model), corpus, config,
                             [&](std::int64_t step, const Model& snapshot) {
                               char name[32];
                               std::snprintf(name, sizeof(name), "step_%08lld.ckpt",
                                             static_cast<long long>(step));
                               const auto path = out_dir / name;
                               SaveCheckpoint(snapshot, path, {step});
                               written.entries.push_back({step, path});
                             });
  WriteFileBytes(out_dir / "train_log.csv", TrainLogToCsv(result));
  if (series != nullptr) *series = std::move(written);
  return result;
}

std::string TrainLogToCsv(const TrainResult& result) {
  std::string out = "step,loss\n";
  char buffer[64];
  for (const auto& [step, loss] : result.log) {
    std::snprintf(buffer, sizeof(buffer), "%lld,%.17g\n", static_cast<long long>(step), loss);
    out += buffer;
  }
  return out;
}

GradCheckResult GradCheck(const Model& model, std::span<const MaskedSequence> batch,
                          double h, double floor) {
  if (!(h > 0.0) || !(floor > 0.0)) throw ConfigError("h and floor must be positive");
  Model analytic;
  MaskedLossAndGradient(model, batch, &analytic, nullptr, 1);
  const std::vector<char> base = Signature(model, batch);
  Model probe = model;
  auto params = Tensors(probe);
  auto grads = Tensors(analytic);
  GradCheckResult result;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const double original = params[t][i];
      params[t][i] = original + h;
      const double plus = MaskedLoss(probe, batch);
      const bool plus_same = Signature(probe, batch) == base;
      params[t][i] = original - h;
      const double minus = MaskedLoss(probe, batch);
      const bool minus_same = Signature(probe, batch) == base;
      params[t][i] = original;
      if (!plus_same || !minus_same) {
        ++result.skipped;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = grads[t][i];
      const double err =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      result.max_relative_error = std::max(result.max_relative_error, err);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace modscope
