// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace slpt {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or a degenerate numeric configuration.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid user-supplied input values.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input; the message carries file and line.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Well-formed input with the wrong structure (e.g. landmark count).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint does not match the requested configuration.
class IncompatibleError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint failed its length or checksum test.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace slpt
