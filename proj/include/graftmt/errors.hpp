// Error types shared by every graftmt module.
#pragma once

#include <stdexcept>
#include <string>

namespace graftmt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not conform to an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Non-finite value seen while strict-finite checking is on.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Caller violated an operation precondition (non-scalar loss, empty batch, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Operation is invalid in the current object state (double backward, double insertion, ...).
class StateError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
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

// Training diverged (validation NLL blew up).
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace graftmt
