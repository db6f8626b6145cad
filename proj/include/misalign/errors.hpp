// Copyright (c) 2026 The misalign authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace misalign {

// Shape disagreement between operands; message names both shapes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A documented precondition was violated by the caller.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Input lies outside the mathematical domain of the requested formula.
struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Closed-form inversion requested outside its square invertible regime.
struct InapplicableError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad key, value, or file in user-facing configuration. CLI exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File read/write/parse failure. CLI exit code 1.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace misalign
