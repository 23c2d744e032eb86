// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace clseg {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid shapes, hyperparameters or config files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse (e.g. backward from a non-scalar).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Input data violates a precondition (non-binary masks, empty sets, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Named-tensor sets disagree on names or shapes.
class SchemaError : public Error {
 public:
  using Error::Error;
};

/// File failed magic, length or integrity-hash checks.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

/// Requested head, domain state or ensemble member does not exist.
class RoutingError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced in a forward, backward or optimizer step.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace clseg
