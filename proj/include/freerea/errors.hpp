// Copyright 2026 The freerea Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace freerea {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FREEREA_DEFINE_ERROR(Name)               \
  class Name : public Error {                    \
   public:                                       \
    explicit Name(const std::string& what)       \
        : Error(std::string(#Name ": ") + what) {} \
  }

// searchspace
FREEREA_DEFINE_ERROR(InvalidGenotype);
FREEREA_DEFINE_ERROR(FamilyMismatch);
FREEREA_DEFINE_ERROR(ValidityExhausted);
FREEREA_DEFINE_ERROR(UnsupportedSpace);
FREEREA_DEFINE_ERROR(GenotypeParseError);

// autodiff / netbuilder / metrics
FREEREA_DEFINE_ERROR(ShapeMismatch);
FREEREA_DEFINE_ERROR(NoForwardCache);
FREEREA_DEFINE_ERROR(BatchShapeMismatch);
FREEREA_DEFINE_ERROR(InvalidSkeleton);

// fitness / evolve
FREEREA_DEFINE_ERROR(EmptyRegistry);
FREEREA_DEFINE_ERROR(InfeasibleSpace);
FREEREA_DEFINE_ERROR(RetryCapExceeded);
FREEREA_DEFINE_ERROR(InvalidConfig);

// benchio
FREEREA_DEFINE_ERROR(DuplicateGenotype);
FREEREA_DEFINE_ERROR(LengthMismatch);
FREEREA_DEFINE_ERROR(DegenerateInput);
FREEREA_DEFINE_ERROR(NoFeasibleEntry);
FREEREA_DEFINE_ERROR(MissingGenotype);

#undef FREEREA_DEFINE_ERROR

/// Malformed tabular or batch file. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error("ParseError at line " + std::to_string(line) + ": " + what),
        line_(line) {}
  explicit ParseError(const std::string& what)
      : Error("ParseError: " + what), line_(0) {}

  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace freerea
