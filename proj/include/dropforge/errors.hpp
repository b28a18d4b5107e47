#pragma once

#include <stdexcept>
#include <string>

namespace dropforge {

// Error taxonomy shared across the library. The CLI maps any DomainError
// to exit code 1; command-line misuse maps to exit code 2.
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : DomainError { using DomainError::DomainError; };
struct InputError : DomainError { using DomainError::DomainError; };
struct UsageError : DomainError { using DomainError::DomainError; };
struct CapacityError : DomainError { using DomainError::DomainError; };
struct PlanError : DomainError { using DomainError::DomainError; };
struct ScoringError : DomainError { using DomainError::DomainError; };
struct TrainingError : DomainError { using DomainError::DomainError; };

}  // namespace dropforge
