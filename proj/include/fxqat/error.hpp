#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fxqat {

enum class ErrorCode {
  InvalidInput,
  InvalidRescale,
  ShapeError,
  InvalidBN,
  ExportError,
  QFormatError,
  TooShort,
  LayoutError,
  MetricError,
  InvalidStep,
  TrainingDiverged,
  ConfigError,
  IoError,
  FormatError,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidInput: return "InvalidInput";
    case ErrorCode::InvalidRescale: return "InvalidRescale";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::InvalidBN: return "InvalidBN";
    case ErrorCode::ExportError: return "ExportError";
    case ErrorCode::QFormatError: return "QFormatError";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::LayoutError: return "LayoutError";
    case ErrorCode::MetricError: return "MetricError";
    case ErrorCode::InvalidStep: return "InvalidStep";
    case ErrorCode::TrainingDiverged: return "TrainingDiverged";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::FormatError: return "FormatError";
  }
  return "Unknown";
}

// Every failure raised by the library carries one of the codes above so
// callers (the CLI in particular) can map it onto an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, std::string_view what) {
  if (!cond) fail(code, std::string(what));
}

}  // namespace fxqat
