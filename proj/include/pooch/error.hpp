// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace pooch {

/// Base class for every error raised by the planner.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file (bad JSON, wrong field types, unknown enum names).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input that breaks a data-model invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// An operation was called outside its precondition.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// The problem cannot be planned (e.g. even the all-swap placement runs out of memory).
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace pooch
