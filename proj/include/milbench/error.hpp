#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace milbench {

/// Base of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 2; }
};

/// Bad command-line usage (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 1; }
};

/// Invalid input data or configuration (exit code 2).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary file. Carries the byte offset at which decoding failed.
class FormatError : public ValidationError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : ValidationError(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Non-finite loss/gradient or a statistic that is undefined on the input
/// (exit code 3).
class NumericError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

}  // namespace milbench
