#pragma once

#include <stdexcept>
#include <string>

namespace cfu {

/// Root of every error raised by the library. The CLI maps the concrete
/// subclasses onto process exit codes (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-supplied configuration (flags, dataset specs, run configs).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

class CalibrationError : public Error {
 public:
  using Error::Error;
};

/// Inputs that individually parse but disagree with each other, e.g. a
/// split member with no row in a probability matrix.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Non-finite or exploding loss during SGD.
class DivergenceError : public TrainingError {
 public:
  using TrainingError::TrainingError;
};

/// Process exit codes used by the command-line front end.
enum class ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3 };

inline ExitCode exit_code(const Error& e) {
  if (dynamic_cast<const DivergenceError*>(&e) != nullptr) return ExitCode::kDivergence;
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return ExitCode::kUsage;
  return ExitCode::kData;
}

}  // namespace cfu
