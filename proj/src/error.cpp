#include "bonetrack/error.hpp"

namespace bonetrack {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Range: return "range";
    case ErrorKind::Augmentation: return "augmentation";
    case ErrorKind::Dataset: return "dataset";
    case ErrorKind::Generator: return "generator";
    case ErrorKind::Training: return "training";
    case ErrorKind::Evaluation: return "evaluation";
  }
  return "unknown";
}

}  // namespace bonetrack
