#pragma once

#include <stdexcept>
#include <string>

namespace geocap {

/// Malformed or inconsistent input data (files, records, references).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent hyperparameters, shapes or variant selection.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or a failed numeric precondition.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace geocap
