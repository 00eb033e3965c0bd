#pragma once

#include <stdexcept>
#include <string>

namespace ptsn {

// Error taxonomy. The CLI maps each family onto a distinct exit code.

/// Invalid configuration or precondition on user-supplied settings.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, missing or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between tensors.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value detected in checked mode.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ptsn
