#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace facaid {

enum class ErrorCode {
  InvalidTree,
  NonPositiveSizing,
  TooManyRects,
  MalformedSequence,
  LengthExceeded,
  IllegalTransition,
  EmptyMask,
  LengthBudgetExhausted,
  DimensionMismatch,
  NonFiniteLoss,
  SinkFailure,
  CheckpointLoadFailure,
  BindFailure,
  BadInput,
  Divergence,
  ModelUnavailable,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidTree: return "invalid_tree";
    case ErrorCode::NonPositiveSizing: return "non_positive_sizing";
    case ErrorCode::TooManyRects: return "too_many_rects";
    case ErrorCode::MalformedSequence: return "malformed_sequence";
    case ErrorCode::LengthExceeded: return "length_exceeded";
    case ErrorCode::IllegalTransition: return "illegal_transition";
    case ErrorCode::EmptyMask: return "empty_mask";
    case ErrorCode::LengthBudgetExhausted: return "length_budget_exhausted";
    case ErrorCode::DimensionMismatch: return "dimension_mismatch";
    case ErrorCode::NonFiniteLoss: return "non_finite_loss";
    case ErrorCode::SinkFailure: return "sink_failure";
    case ErrorCode::CheckpointLoadFailure: return "checkpoint_load_failure";
    case ErrorCode::BindFailure: return "bind_failure";
    case ErrorCode::BadInput: return "bad_input";
    case ErrorCode::Divergence: return "divergence";
    case ErrorCode::ModelUnavailable: return "model_unavailable";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + detail),
        code_(code),
        detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace facaid
