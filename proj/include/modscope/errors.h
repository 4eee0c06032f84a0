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

#ifndef MODSCOPE_ERRORS_H_
#define MODSCOPE_ERRORS_H_

#include <cstdint>
#include <stdexcept>
#include <string>

namespace modscope {

// Process exit codes used by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kValidation = 2,
  kCompute = 3,
  kIo = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ExitCode code, const std::string& kind, const std::string& message)
      : std::runtime_error(kind + ": " + message), code_(code), kind_(kind) {}

  ExitCode code() const { return code_; }
  const std::string& kind() const { return kind_; }

 private:
  ExitCode code_;
  std::string kind_;
};

// Bad configuration or parameter ranges, caught before any compute.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message)
      : Error(ExitCode::kValidation, "config error", message) {}
};

// Well-formed input that violates a data contract (labels, vocab, shapes).
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& message)
      : Error(ExitCode::kValidation, "validation error", message) {}
};

// Numerical failure during a computation (divergence, undefined statistic).
class ComputeError : public Error {
 public:
  explicit ComputeError(const std::string& message)
      : Error(ExitCode::kCompute, "compute error", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message)
      : Error(ExitCode::kIo, "io error", message) {}
};

// Malformed file contents. `position` is a byte offset for binary files and a
// 1-based line number for line-delimited files.
class ParseError : public Error {
 public:
  ParseError(const std::string& message, std::uint64_t position)
      : Error(ExitCode::kIo, "parse error", message), position_(position) {}

  std::uint64_t position() const { return position_; }

 private:
  std::uint64_t position_;
};

}  // namespace modscope

#endif  // MODSCOPE_ERRORS_H_
