#pragma once

#include <stdexcept>
#include <string>

namespace ksm {

// Bad user input: malformed config, inconsistent dimensions, unknown names.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Violated numerical precondition or failed iteration (degenerate aggregates,
// negative coefficient, divergence, non-convergence).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File system and serialization failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ksm
