#pragma once

#include <stdexcept>
#include <string>

namespace ldkl {

/// Base of every error raised by the library. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or hyperparameter value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Factorization failure or a non-finite value where one is not allowed.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset or checkpoint file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Misuse of an API contract (single-use tape, non-scalar backward root, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ldkl
