#ifndef APT_CORE_ERROR_HPP
#define APT_CORE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace apt {

// Stable error categories. The C API maps these 1:1 onto apt_status codes,
// so values must not be reordered.
enum class ErrorCode {
  InvalidArgument = 1,
  ShapeMismatch = 2,
  Numeric = 3,
  Contract = 4,
  Config = 5,
  Io = 6,
  BadMagic = 7,
  BadVersion = 8,
  Truncated = 9,
  Internal = 10,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::ShapeMismatch: return "shape_mismatch";
    case ErrorCode::Numeric: return "numeric";
    case ErrorCode::Contract: return "contract";
    case ErrorCode::Config: return "config";
    case ErrorCode::Io: return "io";
    case ErrorCode::BadMagic: return "bad_magic";
    case ErrorCode::BadVersion: return "bad_version";
    case ErrorCode::Truncated: return "truncated";
    case ErrorCode::Internal: return "internal";
  }
  return "unknown";
}

}  // namespace apt

#endif  // APT_CORE_ERROR_HPP
