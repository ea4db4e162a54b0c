// Copyright (c) 2026, The RBDC Authors
// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy shared by every module. Each kind maps onto one CLI exit code.

#pragma once

#include <stdexcept>
#include <string>

namespace rbdc {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor shapes do not conform for the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// NaN or Inf produced by an operation.
class NumericError : public Error {
public:
    using Error::Error;
};

// Object used in a state that does not allow the call (consumed tape, missing stats).
class StateError : public Error {
public:
    using Error::Error;
};

// Inconsistent ModelSpec, non-halvable width, bad config values.
class SpecError : public Error {
public:
    using Error::Error;
};

// Malformed file contents (checkpoint container, IDX).
class FormatError : public Error {
public:
    using Error::Error;
};

// Coupling rule cannot be applied (role mismatch, layout mismatch, spec mismatch).
class RuleError : public Error {
public:
    using Error::Error;
};

// Argument outside the mathematical domain of a formula.
class DomainError : public Error {
public:
    using Error::Error;
};

// Non-finite loss during optimization; carries the location.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::size_t epoch, std::size_t batch)
        : Error(what + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ")"),
          epoch_(epoch), batch_(batch) {}

    std::size_t epoch() const noexcept { return epoch_; }
    std::size_t batch() const noexcept { return batch_; }

private:
    std::size_t epoch_;
    std::size_t batch_;
};

// Verification was refused because inputs are not related as claimed.
class VerificationError : public Error {
public:
    using Error::Error;
};

} // namespace rbdc
