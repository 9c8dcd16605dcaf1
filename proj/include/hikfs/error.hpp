#pragma once

#include <stdexcept>
#include <string>

namespace hikfs {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes or sizes are incompatible with the requested operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the differentiation graph (non-scalar loss, double backward, ...).
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, degenerate directions and similar runtime numeric failures.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters, flags or configuration files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent dataset, hierarchy or checkpoint contents.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace hikfs
