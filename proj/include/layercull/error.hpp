#pragma once

#include <stdexcept>
#include <string>

namespace layercull {

enum class ErrorKind {
  kDimension,  // incompatible tensor shapes
  kNumeric,    // NaN/Inf where a finite value is required
  kConfig,     // invalid configuration or unknown option value
  kInput,      // bad user-supplied data (token ids, corpus length, alpha)
  kIndex,      // layer index out of range
  kSchema,     // checkpoint does not match its declared layout
  kIo,         // file system failure
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kConfig: return "configuration error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kIndex: return "index error";
    case ErrorKind::kSchema: return "schema error";
    case ErrorKind::kIo: return "I/O error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace layercull
