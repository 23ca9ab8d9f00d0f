#pragma once

#include <stdexcept>
#include <string>

namespace wgflow {

/// Base exception for every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when user-supplied input (config, file, argument) is invalid.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Raised when an iterative numerical procedure does not reach its tolerance.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace wgflow
