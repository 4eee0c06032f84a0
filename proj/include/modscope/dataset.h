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

#ifndef MODSCOPE_DATASET_H_
#define MODSCOPE_DATASET_H_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace modscope {

enum class FunctionCategory { kSemantic, kKnowledge, kTask, kCustom };

std::string_view CategoryName(FunctionCategory category);
std::optional<FunctionCategory> ParseCategory(std::string_view name);

struct Instance {
  std::vector<int> tokens;
  int label = 0;  // 0 or 1

  friend bool operator==(const Instance&, const Instance&) = default;
};

// One binary classification problem probing a single sub-function.
struct SubFunctionDataset {
  std::string id;
  FunctionCategory category = FunctionCategory::kCustom;
  // Grouping key for function-level statistics. Equals the category name for
  // the built-in categories; custom sub-functions may name their own group.
  std::string function;
  std::vector<Instance> instances;

  int CountLabel(int label) const;
  // Throws ValidationError when a label is missing or outside {0, 1}.
  void Validate() const;

  friend bool operator==(const SubFunctionDataset&, const SubFunctionDataset&) = default;
};

struct FunctionSuite {
  std::vector<SubFunctionDataset> sub_functions;

  // Function names in order of first appearance.
  std::vector<std::string> Functions() const;
  // Number of sub-functions per function (M for each function).
  std::map<std::string, int> FunctionCounts() const;
  // Indices into sub_functions belonging to `function`.
  std::vector<int> IndicesOf(std::string_view function) const;
  int IndexOf(std::string_view sub_function_id) const;  // -1 when absent
  void Validate() const;

  friend bool operator==(const FunctionSuite&, const FunctionSuite&) = default;
};

// Line-delimited JSON, one instance per line:
//   {"sub_function": "...", "category": "semantic"|"knowledge"|"task"|"custom",
//    "function": "...", "tokens": [ids], "label": 0|1}
// "function" is optional. A category outside the built-in set is accepted only
// when the record carries "custom": true, and then names a custom function.
// Gzip-compressed files are read transparently.
FunctionSuite LoadSuite(const std::filesystem::path& path);
FunctionSuite ParseSuite(std::string_view text);

// Canonical serialization: sub-functions in suite order, sorted keys.
std::string SerializeSuite(const FunctionSuite& suite);
void SaveSuite(const FunctionSuite& suite, const std::filesystem::path& path);

// At most `per_class` instances of each label, uniformly sampled without
// replacement and kept in original order. Classes smaller than `per_class` are
// kept whole.
SubFunctionDataset BalancedSubsample(const SubFunctionDataset& dataset,
                                     int per_class, std::uint64_t seed);

// Corpus for the masked-token trainer: one whitespace-separated token-id
// sequence per line.
std::vector<std::vector<int>> LoadCorpus(const std::filesystem::path& path);
void SaveCorpus(const std::vector<std::vector<int>>& corpus,
                const std::filesystem::path& path);

// Reads a whole text file, decompressing gzip input when present.
std::string ReadMaybeGzip(const std::filesystem::path& path);

}  // namespace modscope

#endif  // MODSCOPE_DATASET_H_
