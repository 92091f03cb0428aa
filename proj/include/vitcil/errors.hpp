#pragma once

#include <stdexcept>
#include <string>

namespace vitcil {

// Input violates an operation's shape or range contract.
struct RejectedInput : std::invalid_argument {
  explicit RejectedInput(const std::string& msg) : std::invalid_argument(msg) {}
};

// A non-finite value appeared; the message names the layer or loss term.
struct NumericalFailure : std::runtime_error {
  explicit NumericalFailure(const std::string& msg) : std::runtime_error(msg) {}
};

// Update attempted on a prototype whose task has been finalized.
struct ImmutabilityError : std::logic_error {
  explicit ImmutabilityError(const std::string& msg) : std::logic_error(msg) {}
};

// finalize_task called while some class of the task never received an update.
struct IncompleteTaskError : std::logic_error {
  explicit IncompleteTaskError(const std::string& msg) : std::logic_error(msg) {}
};

// Old-class sampling requested from a store with no finalized classes.
struct EmptyStoreError : std::runtime_error {
  explicit EmptyStoreError(const std::string& msg) : std::runtime_error(msg) {}
};

// Incremental-learning protocol broken (e.g. task classes overlap history).
struct ProtocolViolation : std::logic_error {
  explicit ProtocolViolation(const std::string& msg) : std::logic_error(msg) {}
};

// Dataset source missing or malformed.
struct IngestionError : std::runtime_error {
  explicit IngestionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unknown or malformed configuration key/value.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace vitcil
