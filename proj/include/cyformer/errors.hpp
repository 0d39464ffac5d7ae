#pragma once

#include <stdexcept>
#include <string>

namespace cyformer {

// Shapes that do not compose (matmul inner dims, elementwise operands, ...).
class DimensionError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// A caller broke a documented precondition.
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

// Invalid model / training / experiment configuration.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (CSV rows, checkpoints).
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace cyformer
