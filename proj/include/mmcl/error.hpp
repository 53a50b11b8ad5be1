#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mmcl {

enum class ErrorKind {
  ZeroRow,
  DimensionMismatch,
  InvalidRate,
  UnknownToken,
  TraceMismatch,
  BatchTooSmall,
  MissingInput,
  EmptyInput,
  EmptyClass,
  InvalidSchedule,
  ShapeMismatch,
  EmptyDataset,
  OverlapLeak,
  SpecInvalid,
  NeedTwoClasses,
  ParseError,
  MissingPlaceholder,
  ConfigInvalid,
  CheckpointMismatch,
  NumericFailure,
  Io,
};

std::string_view to_string(ErrorKind kind);

// Every failure in the library is reported through this type. `index` carries
// the offending row or line number where one exists.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message,
        std::optional<std::size_t> index = std::nullopt);

  ErrorKind kind() const noexcept { return kind_; }
  std::optional<std::size_t> index() const noexcept { return index_; }

 private:
  ErrorKind kind_;
  std::optional<std::size_t> index_;
};

}  // namespace mmcl
