#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ctrlr {

enum class ErrorCode {
  UnknownToken,
  EmptyPhrase,
  EmptyConstraint,
  InvalidToken,
  DegenerateCorpus,
  InfeasibleStep,
  NonFiniteGradient,
  NonFiniteLoss,
  CalibrationFailed,
  BudgetExceeded,
  MalformedDump,
  InvalidArgument,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::EmptyPhrase: return "EmptyPhrase";
    case ErrorCode::EmptyConstraint: return "EmptyConstraint";
    case ErrorCode::InvalidToken: return "InvalidToken";
    case ErrorCode::DegenerateCorpus: return "DegenerateCorpus";
    case ErrorCode::InfeasibleStep: return "InfeasibleStep";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::CalibrationFailed: return "CalibrationFailed";
    case ErrorCode::BudgetExceeded: return "BudgetExceeded";
    case ErrorCode::MalformedDump: return "MalformedDump";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ctrlr
