#pragma once

#include <stdexcept>
#include <string>

namespace regime {

// Invalid input values (negative counts, nonbinary Jaccard input, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Sequence/shape too short or mismatched.
class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Factorization failures, non-PD covariances, all-zero weights.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by the pipeline when a configuration is rejected.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace regime
