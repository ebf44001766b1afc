#pragma once

#include <stdexcept>
#include <string>

namespace lpcr {

// Invalid configuration or misuse of an interface. CLI maps this to exit 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Corrupt or inconsistent data on disk (checksums, malformed files). Exit 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure (divergence, failed gradient check). Exit 4.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace lpcr
