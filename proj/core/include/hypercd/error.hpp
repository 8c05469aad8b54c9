#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hypercd {

// Stable error classes. The CLI maps each to a fixed process exit code.
enum class ErrorKind {
  kUsage = 2,
  kIo = 3,
  kFormat = 4,
  kInvalidData = 5,
  kShapeMismatch = 6,
  kNumeric = 7,
  kState = 8,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace hypercd
