// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace smd {

/// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Softmax row with every entry excluded by the mask sentinel.
class DegenerateRowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A generation query whose visible key set is empty.
class DegenerateVisibilityError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Caller violated an operation precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad user input (token ids, files).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid configuration value.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace smd
