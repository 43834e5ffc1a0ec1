#pragma once

#include <stdexcept>
#include <string>

namespace qualirt {

// Invalid model construction or parameter values (non-decreasing graded
// intercepts, dimension mismatch, identifiability violations, ...).
class ModelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Problems with input data: malformed files, unknown items, infeasible
// matching requests.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure: non-PD covariance, underflow to zero posterior mass,
// singular information matrices when a caller asked for a hard failure.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration or command-line usage.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace qualirt
