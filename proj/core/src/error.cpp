#include "pcrd/error.hpp"

namespace pcrd {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DegenerateQuaternion: return "DegenerateQuaternion";
    case ErrorCode::NotARotation: return "NotARotation";
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::WeightUnderflow: return "WeightUnderflow";
    case ErrorCode::BadRange: return "BadRange";
    case ErrorCode::GimbalLock: return "GimbalLock";
    case ErrorCode::BadStepCount: return "BadStepCount";
    case ErrorCode::StepOutOfRange: return "StepOutOfRange";
    case ErrorCode::BadStepOrder: return "BadStepOrder";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingGradient: return "MissingGradient";
    case ErrorCode::NonDeterministicLoss: return "NonDeterministicLoss";
    case ErrorCode::TooFewPoints: return "TooFewPoints";
    case ErrorCode::NumericalOverflow: return "NumericalOverflow";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::BadCount: return "BadCount";
    case ErrorCode::BadFraction: return "BadFraction";
    case ErrorCode::EmptySet: return "EmptySet";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::CheckpointVersionMismatch: return "CheckpointVersionMismatch";
  }
  return "Unknown";
}

bool is_io_error(ErrorCode code) {
  return code == ErrorCode::IoFailure || code == ErrorCode::ParseError ||
         code == ErrorCode::CheckpointVersionMismatch;
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

}  // namespace pcrd
