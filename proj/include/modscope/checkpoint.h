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

#ifndef MODSCOPE_CHECKPOINT_H_
#define MODSCOPE_CHECKPOINT_H_

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"
#include "modscope/model.h"

namespace modscope {

// Checkpoint container, little-endian throughout:
//
//   bytes 0-3   magic "MSCK"
//   bytes 4-7   u32 format version (1)
//   bytes 8-15  u64 header length H
//   next H      UTF-8 JSON header: {"config": ..., "step": ..., "tensors":
//               [{"name", "rows", "cols"}, ...]}
//   remainder   row-major float32 tensors in header order
//
// Weights are stored as 32-bit floats, so a model round-trips exactly when its
// parameters are float-representable (InitModel and the trainer guarantee it).
struct CheckpointMeta {
  std::int64_t step = 0;
};

struct Checkpoint {
  Model model;
  CheckpointMeta meta;
};

std::string EncodeCheckpoint(const Model& model, const CheckpointMeta& meta = {});

// Throws ParseError carrying the byte offset of the first bad field. Nothing
// is returned on failure.
Checkpoint DecodeCheckpoint(std::string_view bytes);

void SaveCheckpoint(const Model& model, const std::filesystem::path& path,
                    const CheckpointMeta& meta = {});
Checkpoint LoadCheckpoint(const std::filesystem::path& path);

nlohmann::json ConfigToJson(const ModelConfig& config);
ModelConfig ConfigFromJson(const nlohmann::json& json);

// Whole-file helpers shared by the binary formats.
std::string ReadFileBytes(const std::filesystem::path& path);
void WriteFileBytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace modscope

#endif  // MODSCOPE_CHECKPOINT_H_
