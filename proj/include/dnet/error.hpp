#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dnet {

enum class ErrorCode {
  shape_mismatch,
  invalid_argument,
  graph,
  io,
  parse,
  config,
};

std::string_view to_string(ErrorCode code);

/// Library-wide exception. `code()` is stable and machine readable; the CLI
/// prints it as `error: <code>: <message>`.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace dnet
