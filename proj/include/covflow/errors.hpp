#pragma once

#include <stdexcept>
#include <string>

namespace covflow {

// Exit-code-bearing error categories used across the toolkit:
// configuration/usage (2), data/file problems (3), numeric failures (4).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace covflow
