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

#include "modscope/dataset.h"

#include <zlib.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "modscope/checkpoint.h"
#include "modscope/errors.h"

namespace modscope {
namespace {

using nlohmann::json;

std::string LineTag(size_t line) { return "line " + std::to_string(line); }

}  // namespace

std::string_view CategoryName(FunctionCategory category) {
  switch (category) {
    case FunctionCategory::kSemantic:
      return "semantic";
    case FunctionCategory::kKnowledge:
      return "knowledge";
    case FunctionCategory::kTask:
      return "task";
    case FunctionCategory::kCustom:
      return "custom";
  }
  return "custom";
}

std::optional<FunctionCategory> ParseCategory(std::string_view name) {
  if (name == "semantic") return FunctionCategory::kSemantic;
  if (name == "knowledge") return FunctionCategory::kKnowledge;
  if (name == "task") return FunctionCategory::kTask;
  if (name == "custom") return FunctionCategory::kCustom;
  return std::nullopt;
}

int SubFunctionDataset::CountLabel(int label) const {
  return static_cast<int>(std::count_if(
      instances.begin(), instances.end(),
      [label](const Instance& inst) { return inst.label == label; }));
}

void SubFunctionDataset::Validate() const {
  if (id.empty()) throw ValidationError("sub-function with empty id");
  for (const Instance& inst : instances) {
    if (inst.label != 0 && inst.label != 1) {
      throw ValidationError("sub-function '" + id + "' has label " +
                            std::to_string(inst.label));
    }
    if (inst.tokens.empty()) {
      throw ValidationError("sub-function '" + id + "' has an empty token sequence");
    }
  }
  if (CountLabel(0) == 0 || CountLabel(1) == 0) {
    throw ValidationError("sub-function '" + id + "' lacks one of the two classes");
  }
}

std::vector<std::string> FunctionSuite::Functions() const {
  std::vector<std::string> names;
  for (const auto& sf : sub_functions) {
    if (std::find(names.begin(), names.end(), sf.function) == names.end()) {
      names.push_back(sf.function);
    }
  }
  return names;
}

std::map<std::string, int> FunctionSuite::FunctionCounts() const {
  std::map<std::string, int> counts;
  for (const auto& sf : sub_functions) ++counts[sf.function];
  return counts;
}

std::vector<int> FunctionSuite::IndicesOf(std::string_view function) const {
  std::vector<int> indices;
  for (size_t i = 0; i < sub_functions.size(); ++i) {
    if (sub_functions[i].function == function) indices.push_back(static_cast<int>(i));
  }
  return indices;
}

int FunctionSuite::IndexOf(std::string_view sub_function_id) const {
  for (size_t i = 0; i < sub_functions.size(); ++i) {
    if (sub_functions[i].id == sub_function_id) return static_cast<int>(i);
  }
  return -1;
}

void FunctionSuite::Validate() const {
  if (sub_functions.empty()) throw ValidationError("suite has no sub-functions");
  std::unordered_map<std::string, int> seen;
  for (const auto& sf : sub_functions) {
    if (!seen.emplace(sf.id, 1).second) {
      throw ValidationError("duplicate sub-function id '" + sf.id + "'");
    }
    sf.Validate();
  }
}

FunctionSuite ParseSuite(std::string_view text) {
  FunctionSuite suite;
  std::unordered_map<std::string, size_t> index_of;
  size_t line_no = 0;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(LineTag(line_no) + ": " + e.what(), line_no);
    }
    std::string id, category_name, function;
    std::vector<int> tokens;
    int label = 0;
    bool custom_flag = false;
    try {
      id = record.at("sub_function").get<std::string>();
      category_name = record.at("category").get<std::string>();
      tokens = record.at("tokens").get<std::vector<int>>();
      label = record.at("label").get<int>();
      function = record.value("function", std::string());
      custom_flag = record.value("custom", false);
    } catch (const json::exception& e) {
      throw ParseError(LineTag(line_no) + ": " + e.what(), line_no);
    }

    std::optional<FunctionCategory> category = ParseCategory(category_name);
    if (!category) {
      if (!custom_flag) {
        throw ValidationError(LineTag(line_no) + ": unknown category '" +
                              category_name + "' (mark custom to accept)");
      }
      category = FunctionCategory::kCustom;
      if (function.empty()) function = category_name;
    }
    if (function.empty()) function = std::string(CategoryName(*category));
    if (*category != FunctionCategory::kCustom &&
        function != CategoryName(*category)) {
      throw ValidationError(LineTag(line_no) + ": function '" + function +
                            "' conflicts with category '" + category_name + "'");
    }
    if (label != 0 && label != 1) {
      throw ValidationError(LineTag(line_no) + ": label " + std::to_string(label) +
                            " outside {0, 1}");
    }
    if (tokens.empty()) {
      throw ValidationError(LineTag(line_no) + ": empty token sequence");
    }
    if (std::any_of(tokens.begin(), tokens.end(), [](int t) { return t < 0; })) {
      throw ValidationError(LineTag(line_no) + ": negative token id");
    }

    auto [it, inserted] = index_of.emplace(id, suite.sub_functions.size());
    if (inserted) {
      suite.sub_functions.push_back({id, *category, function, {}});
    } else {
      const SubFunctionDataset& existing = suite.sub_functions[it->second];
      if (existing.category != *category || existing.function != function) {
        throw ValidationError(LineTag(line_no) + ": sub-function '" + id +
                              "' changes category");
      }
    }
    suite.sub_functions[it->second].instances.push_back({std::move(tokens), label});
  }
  suite.Validate();
  return suite;
}

std::string ReadMaybeGzip(const std::filesystem::path& path) {
  // gzread passes uncompressed files through unchanged.
  gzFile file = gzopen(path.c_str(), "rb");
  if (!file) throw IoError("cannot open '" + path.string() + "' for reading");
  std::string text;
  char buffer[1 << 16];
  int n = 0;
  while ((n = gzread(file, buffer, sizeof(buffer))) > 0) text.append(buffer, n);
  int errnum = 0;
  const char* message = gzerror(file, &errnum);
  const bool failed = n < 0 || (errnum != Z_OK && errnum != Z_BUF_ERROR);
  const std::string error_text = failed ? message : "";
  gzclose(file);
  if (failed) throw IoError("reading '" + path.string() + "': " + error_text);
  return text;
}

FunctionSuite LoadSuite(const std::filesystem::path& path) {
  return ParseSuite(ReadMaybeGzip(path));
}

std::string SerializeSuite(const FunctionSuite& suite) {
  std::string out;
  for (const auto& sf : suite.sub_functions) {
    for (const Instance& inst : sf.instances) {
      json record = {
          {"sub_function", sf.id},
          {"category", CategoryName(sf.category)},
          {"tokens", inst.tokens},
          {"label", inst.label},
      };
      if (sf.category == FunctionCategory::kCustom) record["function"] = sf.function;
      out += record.dump();
      out += '\n';
    }
  }
  return out;
}

void SaveSuite(const FunctionSuite& suite, const std::filesystem::path& path) {
  WriteFileBytes(path, SerializeSuite(suite));
}

SubFunctionDataset BalancedSubsample(const SubFunctionDataset& dataset,
                                     int per_class, std::uint64_t seed) {
  if (per_class < 1) throw ConfigError("per_class must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<int> keep;
  for (int label : {0, 1}) {
    std::vector<int> members;
    for (size_t i = 0; i < dataset.instances.size(); ++i) {
      if (dataset.instances[i].label == label) members.push_back(static_cast<int>(i));
    }
    if (members.empty()) {
      throw ValidationError("sub-function '" + dataset.id + "' has no instances of label " +
                            std::to_string(label));
    }
    if (static_cast<int>(members.size()) > per_class) {
      std::shuffle(members.begin(), members.end(), rng);
      members.resize(per_class);
    }
    keep.insert(keep.end(), members.begin(), members.end());
  }
  std::sort(keep.begin(), keep.end());
  SubFunctionDataset out{dataset.id, dataset.category, dataset.function, {}};
  out.instances.reserve(keep.size());
  for (int i : keep) out.instances.push_back(dataset.instances[i]);
  return out;
}

std::vector<std::vector<int>> LoadCorpus(const std::filesystem::path& path) {
  const std::string text = ReadMaybeGzip(path);
  std::vector<std::vector<int>> corpus;
  std::istringstream lines(text);
  std::string line;
  size_t line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<int> seq;
    std::string field;
    while (fields >> field) {
      try {
        size_t used = 0;
        const int id = std::stoi(field, &used);
        if (used != field.size() || id < 0) throw std::invalid_argument(field);
        seq.push_back(id);
      } catch (const std::exception&) {
        throw ParseError(LineTag(line_no) + ": bad token id '" + field + "'", line_no);
      }
    }
    if (!seq.empty()) corpus.push_back(std::move(seq));
  }
  if (corpus.empty()) throw ValidationError("corpus '" + path.string() + "' is empty");
  return corpus;
}

void SaveCorpus(const std::vector<std::vector<int>>& corpus,
                const std::filesystem::path& path) {
  std::string out;
  for (const auto& seq : corpus) {
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(seq[i]);
    }
    out += '\n';
  }
  WriteFileBytes(path, out);
}

}  // namespace modscope
