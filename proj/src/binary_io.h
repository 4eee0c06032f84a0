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

#ifndef MODSCOPE_SRC_BINARY_IO_H_
#define MODSCOPE_SRC_BINARY_IO_H_

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "json.hpp"
#include "modscope/errors.h"

namespace modscope::internal {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <typename T>
void AppendPod(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T ReadPod(std::string_view bytes, size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

constexpr size_t kPreambleSize = 16;

// magic(4) | u32 version | u64 header length | JSON header.
inline std::string BeginContainer(const char (&magic)[5], std::uint32_t version,
                                  const nlohmann::json& header) {
  const std::string text = header.dump();
  std::string out(magic, 4);
  AppendPod<std::uint32_t>(out, version);
  AppendPod<std::uint64_t>(out, text.size());
  out += text;
  return out;
}

struct ContainerHeader {
  nlohmann::json header;
  size_t payload_offset = 0;
};

inline ContainerHeader ReadContainer(std::string_view bytes, const char (&magic)[5],
                                     std::uint32_t version) {
  if (bytes.size() < kPreambleSize) {
    throw ParseError("truncated preamble", bytes.size());
  }
  if (std::memcmp(bytes.data(), magic, 4) != 0) {
    throw ParseError(std::string("bad magic, expected ") + magic, 0);
  }
  if (ReadPod<std::uint32_t>(bytes, 4) != version) {
    throw ParseError("unsupported format version", 4);
  }
  const auto length = ReadPod<std::uint64_t>(bytes, 8);
  if (length > bytes.size() - kPreambleSize) {
    throw ParseError("header extends past end of file", 8);
  }
  ContainerHeader result;
  try {
    result.header = nlohmann::json::parse(bytes.substr(kPreambleSize, length));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed header: ") + e.what(),
                     kPreambleSize + e.byte);
  }
  result.payload_offset = kPreambleSize + length;
  return result;
}

}  // namespace modscope::internal

#endif  // MODSCOPE_SRC_BINARY_IO_H_
