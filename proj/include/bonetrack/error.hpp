#pragma once

#include <stdexcept>
#include <string>

namespace bonetrack {

enum class ErrorKind {
  Config,
  Io,
  Shape,
  Range,
  Augmentation,
  Dataset,
  Generator,
  Training,
  Evaluation,
};

const char* to_string(ErrorKind kind) noexcept;

// Single exception type for the library; the kind maps onto the C API
// status codes and the CLI's per-class diagnostics.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

}  // namespace bonetrack
