#pragma once

#include <stdexcept>
#include <string>

namespace fedtail {

// Base of every error the library throws. Callers that only need to
// distinguish "ours" from std failures catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical divergence: a loss or gradient went NaN/Inf.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class NonFiniteGradient : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class ZeroDirection : public Error {
 public:
  using Error::Error;
};

class LengthMismatch : public Error {
 public:
  using Error::Error;
};

class DimMismatch : public Error {
 public:
  using Error::Error;
};

class LayoutMismatch : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace fedtail
