#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pcrd {

enum class ErrorCode {
  DegenerateQuaternion,
  NotARotation,
  EmptyCloud,
  DegenerateGeometry,
  WeightUnderflow,
  BadRange,
  GimbalLock,
  BadStepCount,
  StepOutOfRange,
  BadStepOrder,
  ShapeMismatch,
  MissingGradient,
  NonDeterministicLoss,
  TooFewPoints,
  NumericalOverflow,
  NonFiniteLoss,
  IoFailure,
  ParseError,
  BadCount,
  BadFraction,
  EmptySet,
  ConfigError,
  CheckpointVersionMismatch,
};

std::string_view to_string(ErrorCode code);

// I/O and parse failures map to exit code 2 in the CLI; everything else to 1.
bool is_io_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace pcrd
