#pragma once

#include <stdexcept>
#include <string>

namespace cmsa {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes or extents do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An API was called in a state where it cannot run (e.g. backward on a non-scalar).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied input is malformed (empty expression, bad image size, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Stored data is inconsistent (index out of range, corrupt file contents).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Synthetic data generation could not satisfy its constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf was produced while finite-value checking is enabled.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace cmsa
