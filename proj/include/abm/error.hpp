#pragma once

#include <stdexcept>
#include <string>

namespace abm {

enum class ErrorCode {
  invalid_argument,
  shape,
  config,
  io,
  format,
  numeric,
  state,
  runtime,
};

// Single exception type for the library; the code selects the C API status.
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

}  // namespace abm
