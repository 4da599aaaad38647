#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wavemsnet {

enum class ErrorCode {
  shape_mismatch,
  invalid_argument,
  out_of_range,
  numeric,
  format,
  io,
  config,
  state,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::out_of_range: return "out_of_range";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::format: return "format";
    case ErrorCode::io: return "io";
    case ErrorCode::config: return "config";
    case ErrorCode::state: return "state";
  }
  return "unknown";
}

/// Every failure raised by the library. The code is stable and machine
/// checkable; the message names the offending shapes, fields or files.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

}  // namespace wavemsnet
