#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gemnet {

enum class ErrorKind {
  InvalidInput,
  InsufficientData,
  RejectedMeasurement,
  MissingElement,
  ParseError,
  DuplicateRecord,
  GenerationFailed,
  ShapeError,
  InvalidBatch,
  NumericalError,
  InvalidConfig,
  NoUsableData,
  MissingSourceStatistics,
  CalibrationInfeasible,
  MissingArtifact,
  IoError,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library. The kind drives CLI exit codes:
/// NumericalError and IoError are runtime failures, everything else is a
/// validation failure.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace gemnet
