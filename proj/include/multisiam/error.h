#pragma once

#include <stdexcept>
#include <string>

namespace msiam {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Violated operation precondition (bad argument value, empty region, ...).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed or unreadable persisted data (checkpoints, corpus files).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Numeric failure inside training or verification (non-finite values).
class NumericError : public Error {
 public:
  using Error::Error;
};

} // namespace msiam
