#pragma once

#include <stdexcept>
#include <string>

namespace mfam {

// Base of every error thrown by the library. Kept flat: callers that care
// about the category catch the subclass, everyone else catches Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class FamilySupportError : public Error {
 public:
  using Error::Error;
};

// Degenerate input: zero variance, empty bins, too few units.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace mfam
