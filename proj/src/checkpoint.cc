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

#include "modscope/checkpoint.h"

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

#include "binary_io.h"
#include "modscope/errors.h"

namespace modscope {
namespace {

using internal::AppendPod;
using internal::ReadPod;

constexpr char kMagic[5] = "MSCK";
constexpr std::uint32_t kVersion = 1;

// Walks every stored tensor of `model` in canonical order. Vectors are stored
// as single-column matrices.
template <typename ModelT, typename Fn>
void ForEachTensor(ModelT& model, Fn&& fn) {
  fn("embedding", model.embedding);
  fn("lm_head", model.lm_head);
  for (size_t l = 0; l < model.layers.size(); ++l) {
    auto& w = model.layers[l];
    const std::string prefix = "layers." + std::to_string(l) + ".";
    fn(prefix + "w_in", w.w_in);
    fn(prefix + "w_out", w.w_out);
    fn(prefix + "b_in", w.b_in);
    fn(prefix + "b_out", w.b_out);
    fn(prefix + "gate", w.gate);
    fn(prefix + "wq", w.wq);
    fn(prefix + "wk", w.wk);
    fn(prefix + "wv", w.wv);
    fn(prefix + "wo", w.wo);
  }
}

// Shapes the tensors of a freshly sized model should take under `config`.
void AllocateLike(Model& model) {
  const ModelConfig& c = model.config;
  const int d = c.d_model;
  model.embedding.resize(c.vocab_size, d);
  model.lm_head.resize(c.vocab_size, d);
  model.layers.assign(c.num_layers, LayerWeights{});
  for (int l = 0; l < c.num_layers; ++l) {
    LayerWeights& w = model.layers[l];
    w.w_in.resize(c.d_ff, d);
    w.w_out.resize(d, c.d_ff);
    w.b_in.resize(c.d_ff);
    w.b_out.resize(d);
    if (c.IsMoeLayer(l)) w.gate.resize(c.num_experts, d);
    if (c.mixing == Mixing::kAttention) {
      w.wq.resize(d, d);
      w.wk.resize(d, d);
      w.wv.resize(d, d);
      w.wo.resize(d, d);
    }
  }
}

}  // namespace

nlohmann::json ConfigToJson(const ModelConfig& config) {
  nlohmann::json allowed = nlohmann::json::object();
  for (const auto& [layer, experts] : config.allowed_experts) {
    allowed[std::to_string(layer)] = experts;
  }
  return {
      {"vocab_size", config.vocab_size},
      {"num_layers", config.num_layers},
      {"d_model", config.d_model},
      {"d_ff", config.d_ff},
      {"moe_layers", config.moe_layers},
      {"num_experts", config.num_experts},
      {"top_k", config.top_k},
      {"use_bias", config.use_bias},
      {"bias_in_activation", config.bias_in_activation},
      {"mixing", config.mixing == Mixing::kAttention ? "attention" : "identity"},
      {"num_heads", config.num_heads},
      {"seed", config.seed},
      {"allowed_experts", allowed},
  };
}

ModelConfig ConfigFromJson(const nlohmann::json& json) {
  ModelConfig config;
  try {
    config.vocab_size = json.at("vocab_size").get<int>();
    config.num_layers = json.at("num_layers").get<int>();
    config.d_model = json.at("d_model").get<int>();
    config.d_ff = json.at("d_ff").get<int>();
    config.moe_layers = json.at("moe_layers").get<std::vector<int>>();
    config.num_experts = json.at("num_experts").get<int>();
    config.top_k = json.at("top_k").get<int>();
    config.use_bias = json.at("use_bias").get<bool>();
    config.bias_in_activation = json.value("bias_in_activation", false);
    const std::string mixing = json.at("mixing").get<std::string>();
    if (mixing == "attention") {
      config.mixing = Mixing::kAttention;
    } else if (mixing == "identity") {
      config.mixing = Mixing::kIdentity;
    } else {
      throw ConfigError("unknown mixing '" + mixing + "'");
    }
    config.num_heads = json.value("num_heads", 1);
    config.seed = json.value("seed", std::uint64_t{0});
    if (json.contains("allowed_experts")) {
      for (const auto& [key, value] : json.at("allowed_experts").items()) {
        config.allowed_experts[std::stoi(key)] = value.get<std::vector<int>>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  config.Validate();
  return config;
}

std::string EncodeCheckpoint(const Model& model, const CheckpointMeta& meta) {
  model.Validate();
  nlohmann::json tensors = nlohmann::json::array();
  ForEachTensor(model, [&](const std::string& name, const auto& m) {
    if (m.size() == 0) return;
    tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  });
  const nlohmann::json header = {
      {"config", ConfigToJson(model.config)},
      {"step", meta.step},
      {"tensors", tensors},
  };
  std::string out = internal::BeginContainer(kMagic, kVersion, header);
  ForEachTensor(model, [&](const std::string&, const auto& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        AppendPod<float>(out, static_cast<float>(m(r, c)));
      }
    }
  });
  return out;
}

Checkpoint DecodeCheckpoint(std::string_view bytes) {
  const internal::ContainerHeader container =
      internal::ReadContainer(bytes, kMagic, kVersion);
  const nlohmann::json& header = container.header;
  const size_t kPreamble = internal::kPreambleSize;
  const size_t header_len = container.payload_offset - kPreamble;

  Checkpoint result;
  try {
    result.model.config = ConfigFromJson(header.at("config"));
    result.meta.step = header.at("step").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed header: ") + e.what(), kPreamble);
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), kPreamble);
  }
  AllocateLike(result.model);

  std::vector<std::string> expected;
  ForEachTensor(result.model, [&](const std::string& name, auto& m) {
    if (m.size() > 0) expected.push_back(name);
  });
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw ParseError("header lacks a tensor directory", kPreamble);
  }
  const auto& listed = header["tensors"];
  if (listed.size() != expected.size()) {
    throw ParseError("header lists " + std::to_string(listed.size()) +
                         " tensors, config implies " +
                         std::to_string(expected.size()),
                     kPreamble);
  }

  size_t offset = kPreamble + header_len;
  size_t index = 0;
  ForEachTensor(result.model, [&](const std::string& name, auto& m) {
    if (m.size() == 0) return;
    const auto& entry = listed[index++];
    if (entry.value("name", std::string()) != name ||
        entry.value("rows", Eigen::Index{-1}) != m.rows() ||
        entry.value("cols", Eigen::Index{-1}) != m.cols()) {
      throw ParseError("tensor directory mismatch at '" + name + "'", kPreamble);
    }
    const size_t need = static_cast<size_t>(m.size()) * sizeof(float);
    if (bytes.size() - offset < need) {
      throw ParseError("truncated tensor '" + name + "'", bytes.size());
    }
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        m(r, c) = ReadPod<float>(bytes, offset);
        offset += sizeof(float);
      }
    }
  });
  if (offset != bytes.size()) {
    throw ParseError("trailing bytes after last tensor", offset);
  }
  try {
    result.model.Validate();
  } catch (const ValidationError& e) {
    throw ParseError(e.what(), kPreamble + header_len);
  }
  return result;
}

void SaveCheckpoint(const Model& model, const std::filesystem::path& path,
                    const CheckpointMeta& meta) {
  WriteFileBytes(path, EncodeCheckpoint(model, meta));
}

Checkpoint LoadCheckpoint(const std::filesystem::path& path) {
  return DecodeCheckpoint(ReadFileBytes(path));
}

std::string ReadFileBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void WriteFileBytes(const std::filesystem::path& path, std::string_view bytes) {
  // Write to a sibling temp file and rename so readers never see a partial file.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename to '" + path.string() + "' failed: " + ec.message());
}

}  // namespace modscope
