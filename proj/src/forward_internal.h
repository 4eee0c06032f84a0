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

#ifndef MODSCOPE_SRC_FORWARD_INTERNAL_H_
#define MODSCOPE_SRC_FORWARD_INTERNAL_H_

#include <span>
#include <vector>

#include "modscope/model.h"

namespace modscope::internal {

// Intermediates kept for backpropagation.
struct LayerCache {
  Matrix input;                // T x d, before mixing
  Matrix q, k, v;              // T x d
  std::vector<Matrix> probs;   // per head, T x T
  Matrix context;              // T x d, concatenated heads before W_o
  Matrix ffn_input;            // T x d
  Matrix pre_activation;       // T x d_ff, including b^I when enabled
  Matrix activation;           // T x d_ff, values multiplied into W^O
  Matrix router_probs;         // T x E, softmax over allowed experts
  Matrix gates;                // T x E, after hard top-k
};

struct ForwardCache {
  std::vector<LayerCache> layers;
};

ForwardTrace RunForward(const Model& model, std::span<const int> tokens,
                        const ForwardOptions& options, ForwardCache* cache);

// Softmax over allowed experts (others exactly zero).
Vector RouterProbabilities(const Model& model, int layer, const Vector& x);

// Keeps the top_k largest entries (ties to the lower index), zeroes the rest.
Vector HardTopK(const Vector& probs, int top_k);

}  // namespace modscope::internal

#endif  // MODSCOPE_SRC_FORWARD_INTERNAL_H_
