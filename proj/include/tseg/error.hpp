#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tseg {

/// Category of a failure. The CLI prints it as the machine-readable error kind.
enum class ErrorKind {
  Dimension,
  Numeric,
  Label,
  Annotation,
  Input,
  Geometry,
  Manifest,
  Config,
  Graph,
  Training,
  Fit,
  Undefined,
  Validation,
  Busy,
  Io,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace tseg
