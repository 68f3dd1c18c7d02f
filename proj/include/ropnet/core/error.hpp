#pragma once

#include <stdexcept>
#include <string>

namespace ropnet {

// Error taxonomy shared by the library and the CLI exit-code contract.
enum class ErrorKind {
  InvalidParameter,   // bad argument or configuration value
  DegenerateImage,    // no foreground survives masking
  MissingMetadata,    // a required clinical field is absent
  ShapeMismatch,      // tensor/image dimensions disagree
  MissingInput,       // referenced file or artifact not found
  InvalidConfig,      // config fails schema validation
  Runtime             // anything else that aborts a stage
};

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidParameter: return "invalid_parameter";
    case ErrorKind::DegenerateImage:  return "degenerate_image";
    case ErrorKind::MissingMetadata:  return "missing_metadata";
    case ErrorKind::ShapeMismatch:    return "shape_mismatch";
    case ErrorKind::MissingInput:     return "missing_input";
    case ErrorKind::InvalidConfig:    return "invalid_config";
    case ErrorKind::Runtime:          return "runtime";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) raise(kind, msg);
}

}  // namespace ropnet
