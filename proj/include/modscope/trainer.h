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

#ifndef MODSCOPE_TRAINER_H_
#define MODSCOPE_TRAINER_H_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "modscope/dynamics.h"
#include "modscope/model.h"

namespace modscope {

struct TrainConfig {
  int steps = 100;
  int batch_size = 8;
  double learning_rate = 1e-2;
  double mask_probability = 0.15;
  int checkpoint_every = 10;
  std::uint64_t seed = 0;
  int mask_token = -1;  // -1 selects vocab_size - 1
  // The learning rate decays linearly to learning_rate * final_lr_fraction.
  double final_lr_fraction = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int threads = 0;

  void Validate() const;  // throws ConfigError
};

struct MaskedSequence {
  std::vector<int> tokens;     // input with masked positions replaced
  std::vector<int> positions;  // masked positions
  std::vector<int> targets;    // original ids at those positions
};

// Masks each position independently; at least one position is always masked.
MaskedSequence MaskSequence(std::span<const int> tokens, double mask_probability,
                            int mask_token, std::mt19937_64& rng);

// Mean cross-entropy over every masked position of the batch.
double MaskedLoss(const Model& model, std::span<const MaskedSequence> batch);

// Loss and its gradient, stored in a model-shaped container. When `routed` is
// given it receives, per layer, which experts any token of the batch used.
double MaskedLossAndGradient(const Model& model, std::span<const MaskedSequence> batch,
                             Model* gradient,
                             std::vector<std::vector<char>>* routed = nullptr,
                             int threads = 1);

// Same shapes as `model`, all zero.
Model ZeroLike(const Model& model);

struct TrainResult {
  Model model;
  std::vector<std::pair<std::int64_t, double>> log;  // (step, batch loss)
  std::vector<std::int64_t> checkpoint_steps;
  // Per step and MoE-capable layer, which experts received tokens.
  std::vector<std::vector<std::vector<char>>> routed;
};

// Called with the model at step 0, every checkpoint_every steps, and the last
// step.
using CheckpointSink = std::function<void(std::int64_t step, const Model& model)>;

// Adam on the masked-token objective. For MoE layers the input rows, biases
// and output columns of experts no token routed to in a step are left
// untouched, optimizer state included. Throws ComputeError naming the step
// if the loss stops being finite.
TrainResult Train(Model model, const std::vector<std::vector<int>>& corpus,
                  const TrainConfig& config, const CheckpointSink& sink);

// Writes step_XXXXXXXX.ckpt files and train_log.csv into out_dir.
TrainResult TrainToDirectory(Model model, const std::vector<std::vector<int>>& corpus,
                             const TrainConfig& config,
                             const std::filesystem::path& out_dir,
                             CheckpointSeries* series = nullptr);

std::string TrainLogToCsv(const TrainResult& result);

struct GradCheckResult {
  double max_relative_error = 0.0;
  int checked = 0;
  int skipped = 0;  // parameters whose perturbation changes a ReLU or routing choice
};

// Central finite differences with step h against the analytic gradient of
// MaskedLoss. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult GradCheck(const Model& model, std::span<const MaskedSequence> batch,
                          double h = 1e-3, double floor = 1e-6);

}  // namespace modscope

#endif  // MODSCOPE_TRAINER_H_
