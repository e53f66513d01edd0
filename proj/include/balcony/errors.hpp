// Copyright 2026 The Balcony Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace balcony {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes that do not agree for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Misuse of the gradient tape (double backward, empty tape, non-scalar loss).
class TapeError : public Error {
 public:
  using Error::Error;
};

// An index (layer, token, exit, step) outside its valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

// A frozen tensor received a gradient or changed value.
class FreezeViolation : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or unsupported checkpoint file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// No submodel satisfies the requested budget.
class BudgetError : public Error {
 public:
  using Error::Error;
};

// An API call made in a state that does not permit it.
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace balcony
