#pragma once

#include <stdexcept>
#include <string>

namespace btt {

enum class ErrorCode {
  invalid_input,
  io_error,
  parse_error,
  invariant_violation,
  no_such_trial,
  internal,
};

const char* to_string(ErrorCode code) noexcept;

/// Every failure raised by the core carries one of the codes above; the C API
/// maps them one-to-one onto btt_status values.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace btt
