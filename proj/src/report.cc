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

#include "modscope/report.h"

#include <cstdio>

#include "modscope/checkpoint.h"
#include "modscope/errors.h"

namespace modscope {

std::uint64_t Fnv1a64(std::string_view bytes) {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  return hash;
}

std::string HexDigest(std::uint64_t value) {
  char buffer[17];
  std::snprintf(buffer, sizeof(buffer), "%016llx", static_cast<unsigned long long>(value));
  return buffer;
}

std::string DigestFile(const std::filesystem::path& path) {
  return HexDigest(Fnv1a64(ReadFileBytes(path)));
}

nlohmann::json ManifestToJson(const Manifest& manifest) {
  auto files = [](const std::vector<FileDigest>& list) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& f : list) out.push_back({{"path", f.path}, {"fnv1a64", f.digest}});
    return out;
  };
  return {
      {"tool", "modscope"},
      {"version", kToolVersion},
      {"command", manifest.command},
      {"config", manifest.config},
      {"config_hash", HexDigest(Fnv1a64(manifest.config.dump()))},
      {"inputs", files(manifest.inputs)},
      {"outputs", files(manifest.outputs)},
  };
}

ReportWriter::ReportWriter(std::filesystem::path out_dir, std::string command,
                           nlohmann::json config)
    : out_dir_(std::move(out_dir)) {
  manifest_.command = std::move(command);
  manifest_.config = std::move(config);
  std::error_code ec;
  std::filesystem::create_directories(out_dir_, ec);
  if (ec) throw IoError("cannot create " + out_dir_.string() + ": " + ec.message());
}

void ReportWriter::AddInput(const std::filesystem::path& path) {
  manifest_.inputs.push_back({path.string(), DigestFile(path)});
}

void ReportWriter::Write(const std::string& name, std::string_view bytes) {
  WriteFileBytes(out_dir_ / name, bytes);
  manifest_.outputs.push_back({name, HexDigest(Fnv1a64(bytes))});
}

void ReportWriter::WriteJson(const std::string& name, const nlohmann::json& json) {
  Write(name, json.dump(2) + "\n");
}

void ReportWriter::Finish() {
  WriteFileBytes(out_dir_ / "manifest.json", ManifestToJson(manifest_).dump(2) + "\n");
}

int ExitCodeFor(const std::exception& error) {
  if (const auto* e = dynamic_cast<const Error*>(&error)) return static_cast<int>(e->code());
  return static_cast<int>(ExitCode::kCompute);
}

nlohmann::json ErrorReport(const std::exception& error) {
  nlohmann::json body = {{"message", error.what()}, {"exit_code", ExitCodeFor(error)}};
  if (const auto* e = dynamic_cast<const Error*>(&error)) {
    body["kind"] = e->kind();
    if (const auto* p = dynamic_cast<const ParseError*>(&error)) {
      body["position"] = p->position();
    }
  } else {
    body["kind"] = "internal error";
  }
  return {{"error", body}};
}

}  // namespace modscope
