#include "btt/error.hpp"

namespace btt {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_input: return "InvalidInput";
    case ErrorCode::io_error: return "IoError";
    case ErrorCode::parse_error: return "ParseError";
    case ErrorCode::invariant_violation: return "InvariantViolation";
    case ErrorCode::no_such_trial: return "NoSuchTrial";
    case ErrorCode::internal: return "Internal";
  }
  return "Unknown";
}

}  // namespace btt
