#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace thermo {

// Failure classes surfaced through the CLI exit codes.
enum class ErrorCode {
  InvalidInput,  // precondition violated by a caller-supplied value
  Format,        // malformed file contents
  Io,            // filesystem failure
  Config,        // unknown or malformed configuration key
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidInput: return "invalid-input";
    case ErrorCode::Format: return "format";
    case ErrorCode::Io: return "io";
    case ErrorCode::Config: return "config";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorCode::InvalidInput, message);
}

}  // namespace thermo
