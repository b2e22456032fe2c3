#pragma once

#include <stdexcept>
#include <string>

namespace evacnet {

/// Raised for malformed inputs supplied by the operator (CSV schema, config,
/// unknown scenario, registry mismatch). The CLI maps it to exit status 1.
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values surfaced by a numeric kernel or a diverging loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evacnet
