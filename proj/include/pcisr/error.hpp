#pragma once

#include <stdexcept>
#include <string>

namespace pcisr {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/image/operator extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by an operation, division by zero, singular systems.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of the gradient tape (consumed tape, non-scalar root, ...).
class TapeError : public Error {
 public:
  using Error::Error;
};

// Malformed or unsupported file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace pcisr
