#pragma once

#include <stdexcept>
#include <string>

namespace calfuse {

// Failure categories map onto CLI exit codes: usage/validation problems exit 1,
// I/O and data-integrity problems exit 2.
enum class ErrorKind { usage, validation, io, data };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  int exit_code() const noexcept {
    return (kind_ == ErrorKind::io || kind_ == ErrorKind::data) ? 2 : 1;
  }

 private:
  ErrorKind kind_;
};

inline Error usage_error(const std::string& what) {
  return {ErrorKind::usage, what};
}
inline Error validation_error(const std::string& what) {
  return {ErrorKind::validation, what};
}
inline Error io_error(const std::string& what) { return {ErrorKind::io, what}; }
inline Error data_error(const std::string& what) {
  return {ErrorKind::data, what};
}

// Re-raises `e` with a prefix naming where it happened, keeping its kind.
[[noreturn]] inline void rethrow_with_context(const Error& e,
                                              const std::string& context) {
  throw Error(e.kind(), context + ": " + e.what());
}

}  // namespace calfuse
