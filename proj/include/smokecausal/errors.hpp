#pragma once

#include <stdexcept>
#include <string>

namespace smokecausal {

// Input or parameter failed validation. Maps to CLI exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Not enough usable data for an estimator (too few bins, days, draws).
class InsufficientDataError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Factorization or sampler breakdown. Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File system or parse failure outside of schema validation. Exit code 4.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace smokecausal

namespace smokecausal {

// Least-squares design without full column rank.
class RankDeficientError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace smokecausal
