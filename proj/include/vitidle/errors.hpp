#pragma once

#include <stdexcept>
#include <string>

namespace vitidle {

// Shape/extent violations on tensor operands.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Broken preconditions or type invariants (bad partitions, bad configs,
// malformed files, misuse of the tape).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values or failed numeric checks at runtime.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace vitidle
