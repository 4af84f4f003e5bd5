#pragma once

#include <stdexcept>
#include <string>

namespace stockformer {

/// Base class for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or mismatched tensor/matrix shapes. Indicates a caller bug.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input value outside an operation's domain (ln of non-positive,
/// step factor going non-positive, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// An operation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or invalid user-supplied input data
/// (missing file, malformed CSV row, unknown config key, bad auth).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Failure while reading or writing files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Network-level failure (connect/TLS/retries exhausted).
class HttpError : public IoError {
 public:
  using IoError::IoError;
};

}  // namespace stockformer
