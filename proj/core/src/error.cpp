#include "hypercd/error.hpp"

namespace hypercd {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kUsage: return "usage";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kInvalidData: return "invalid-data";
    case ErrorKind::kShapeMismatch: return "shape-mismatch";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kState: return "state";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace hypercd
