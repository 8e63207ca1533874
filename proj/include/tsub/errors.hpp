// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tsub {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define TSUB_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

TSUB_DEFINE_ERROR(NormalizationError);
TSUB_DEFINE_ERROR(DimensionError);
TSUB_DEFINE_ERROR(EmptyIdentityError);
TSUB_DEFINE_ERROR(NumericalError);
TSUB_DEFINE_ERROR(TraceError);
TSUB_DEFINE_ERROR(LabelError);
TSUB_DEFINE_ERROR(ConfigError);
TSUB_DEFINE_ERROR(ScopeTooSmallError);
TSUB_DEFINE_ERROR(CleaningCollapseError);
TSUB_DEFINE_ERROR(EmptyIndexError);
TSUB_DEFINE_ERROR(IndexMismatchError);
TSUB_DEFINE_ERROR(FormatError);

#undef TSUB_DEFINE_ERROR

/// Wraps an error raised inside a named pipeline stage.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace tsub
