#pragma once

#include <stdexcept>
#include <string>

namespace ppb {

// Error categories map one-to-one onto the CLI / C API status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or argument (exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Unreadable, corrupt or inconsistent dataset / checkpoint / report (exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence (exit code 4).
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape contract violated. Treated as a configuration error at the boundary.
class ShapeError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace ppb
