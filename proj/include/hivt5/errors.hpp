// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace hivt5 {

// Bad shapes, dimension mismatches, malformed indices.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite ones are required (NaN inputs, NaN gradients).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated data or file invariants: bad corpus records, checkpoint mismatches,
// stage-ordering violations. Maps to CLI exit code 2.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Inconsistent configuration (budget overflow, bad ratios, unknown keys).
struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

// Misuse of a library contract (non-scalar backward, wrong call order).
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

}  // namespace hivt5
