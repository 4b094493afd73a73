#pragma once

#include <stdexcept>
#include <string>

namespace metro {

// Shape or dimension disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid hyperparameter or schema violation. `key_path` names the offending
// JSON key when the error comes from a config document.
struct ConfigError : std::invalid_argument {
  explicit ConfigError(const std::string& msg, std::string key = {})
      : std::invalid_argument(key.empty() ? msg : key + ": " + msg), key_path(std::move(key)) {}
  std::string key_path;
};

// Malformed or unusable input data (empty mask set, label out of range, ...).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace metro
