#pragma once

#include <stdexcept>
#include <string>

namespace oatr {

/// Shape or extent mismatch between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Caller supplied data that violates an operation's precondition.
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// API misuse, e.g. calling backward() on a non-scalar.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Malformed file content. Messages name the field and line when known.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values reached an optimizer or loss.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace oatr
