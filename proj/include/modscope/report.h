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

#ifndef MODSCOPE_REPORT_H_
#define MODSCOPE_REPORT_H_

#include <cstdint>
#include <exception>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace modscope {

inline constexpr std::string_view kToolVersion = "0.1.0";

// 64-bit FNV-1a.
std::uint64_t Fnv1a64(std::string_view bytes);
std::string HexDigest(std::uint64_t value);  // 16 lowercase hex digits

// Digest of a file's raw bytes. Throws IoError when unreadable.
std::string DigestFile(const std::filesystem::path& path);

struct FileDigest {
  std::string path;
  std::string digest;
};

struct Manifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> outputs;
};

// Records the tool version and a hash of the canonical config dump. No
// timestamps, so reruns with identical inputs give identical manifests.
nlohmann::json ManifestToJson(const Manifest& manifest);

// Writes report files into one directory and finishes with manifest.json.
class ReportWriter {
 public:
  ReportWriter(std::filesystem::path out_dir, std::string command,
               nlohmann::json config);

  void AddInput(const std::filesystem::path& path);
  void Write(const std::string& name, std::string_view bytes);
  void WriteJson(const std::string& name, const nlohmann::json& json);
  void Finish();

  const std::filesystem::path& out_dir() const { return out_dir_; }

 private:
  std::filesystem::path out_dir_;
  Manifest manifest_;
};

// Exit code for an exception: the code carried by Error subclasses, 3 for
// anything else.
int ExitCodeFor(const std::exception& error);
nlohmann::json ErrorReport(const std::exception& error);

}  // namespace modscope

#endif  // MODSCOPE_REPORT_H_
