#pragma once

#include <stdexcept>
#include <string>

namespace scarf {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Unknown scene, pose or key.
class LookupError : public Error {
 public:
  using Error::Error;
};

// Duplicate scene id or an existing output path.
class ConflictError : public Error {
 public:
  using Error::Error;
};

// Unreadable or malformed input data (datasets, model files, config files).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite values detected during optimization.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace scarf
