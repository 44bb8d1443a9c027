#pragma once

#include <stdexcept>
#include <string>

namespace qsdp {

// Malformed input to a library call (bad grid, non-finite value, bad shape).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A computation produced a non-finite value or an oracle refused the problem size.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Experiment configuration rejected during validation. `path` is a JSON pointer.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& what)
      : std::runtime_error(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace qsdp
