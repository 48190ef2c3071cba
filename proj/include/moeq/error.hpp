#pragma once

#include <stdexcept>
#include <string>

namespace moeq {

enum class ErrorKind {
  input,        // malformed caller input (bad token id, bad distribution, ...)
  format,       // corrupt or unrecognized file/packed data
  config,       // invalid parameters or configuration
  consistency,  // objects that do not belong together (cache vs model, ...)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorKind::input, what) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class ConsistencyError : public Error {
 public:
  explicit ConsistencyError(const std::string& what) : Error(ErrorKind::consistency, what) {}
};

// Process exit code for the CLI.
constexpr int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::input:
      return 2;
    case ErrorKind::format:
      return 3;
    case ErrorKind::config:
    case ErrorKind::consistency:
      return 4;
  }
  return 1;
}

}  // namespace moeq
