#pragma once

#include <stdexcept>
#include <string>

namespace gradtrace {

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError -> 1, IoError -> 2, NumericalError -> 3.
// DimensionError/InputError/StateError are programming or data errors and
// surface as config errors at the CLI boundary.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class StateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace gradtrace
