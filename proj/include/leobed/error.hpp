#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace leobed {

enum class ErrorCode {
  InvalidArgument,
  // orbital
  MalformedTle,
  ChecksumMismatch,
  StaleEphemeris,
  // terminal_sim
  ClockRegression,
  OverlapRejected,
  Unavailable,
  // telemetry
  InsufficientHistory,
  SeriesTooShort,
  // triggers
  SyntaxError,
  UnknownMetric,
  TypeError,
  // orchestrator
  ConflictError,
  UnknownNode,
  BadTrigger,
  UnknownRun,
  InvalidSpec,
  // agent
  LaunchFailure,
  UploadFailure,
  IllegalTransition,
  // dissect
  EmptyInput,
  UncoveredHop,
  SegmentOrder,
  // predict
  DegenerateDesign,
  ZeroActual,
  // leolink
  ProfileExhausted,
  EmptyGrid,
  // abr
  TraceTooShort,
  // io
  IoError,
  ParseError,
};

std::string_view to_string(ErrorCode code);

// Every failure surfaced by the library carries a stable machine-readable code;
// the CLI and the wire protocol serialize it verbatim.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }
  std::string_view name() const { return to_string(code_); }

 private:
  ErrorCode code_;
};

// Raised by the orchestrator when a fixed-window OVERHEAD spec clashes.
class ConflictError : public Error {
 public:
  ConflictError(std::vector<std::string> clashing, const std::string& message)
      : Error(ErrorCode::ConflictError, message), clashing_(std::move(clashing)) {}

  const std::vector<std::string>& clashing_ids() const noexcept { return clashing_; }

 private:
  std::vector<std::string> clashing_;
};

class SyntaxError : public Error {
 public:
  SyntaxError(std::size_t position, const std::string& message)
      : Error(ErrorCode::SyntaxError, message + " at position " + std::to_string(position)),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace leobed
