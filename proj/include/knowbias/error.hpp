#pragma once

#include <stdexcept>
#include <string>

namespace knowbias {

// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorCode {
  invalid_argument,  // precondition violated by the caller
  shape_mismatch,
  unknown_op,
  non_finite,        // NaN/Inf produced or consumed
  parse,             // malformed input file
  checksum,
  version,
  config_mismatch,
  io,
  not_found,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid-argument";
    case ErrorCode::shape_mismatch: return "shape-mismatch";
    case ErrorCode::unknown_op: return "unknown-op";
    case ErrorCode::non_finite: return "non-finite";
    case ErrorCode::parse: return "parse";
    case ErrorCode::checksum: return "checksum";
    case ErrorCode::version: return "version";
    case ErrorCode::config_mismatch: return "config-mismatch";
    case ErrorCode::io: return "io";
    case ErrorCode::not_found: return "not-found";
  }
  return "unknown";
}

// 1 usage, 2 data, 3 numeric.
inline int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_argument:
    case ErrorCode::unknown_op:
      return 1;
    case ErrorCode::non_finite:
      return 3;
    default:
      return 2;
  }
}

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace knowbias
