#pragma once

#include <stdexcept>
#include <string>

namespace kpconv {

/// Invalid argument value (non-finite coordinate, non-positive radius, ...).
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct EmptyInputError : ValidationError {
  using ValidationError::ValidationError;
};

/// Tensor dimensions disagree with what an operator expects.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A single batch element does not fit the point budget on its own.
struct OversizedElementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Energy of a kernel disposition is infinite (coincident points).
struct InfiniteEnergyError : std::domain_error {
  using std::domain_error::domain_error;
};

struct NonFiniteLossError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Scene points left unvisited by sphere voting.
struct CoverageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kpconv
