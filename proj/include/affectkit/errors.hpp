#pragma once

#include <stdexcept>
#include <string>

namespace affectkit {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not line up for an operation.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Invalid argument value (probability out of range, even window, ...).
class ArgumentError : public Error {
public:
  using Error::Error;
};

/// Malformed configuration file or unknown key.
class ConfigError : public Error {
public:
  using Error::Error;
};

/// Bad or inconsistent input data: manifests, frames, checkpoints, id sets.
class DataError : public Error {
public:
  using Error::Error;
};

/// Non-finite loss or parameters during training.
class NumericalError : public Error {
public:
  using Error::Error;
};

}  // namespace affectkit
