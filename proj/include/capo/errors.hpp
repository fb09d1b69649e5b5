#pragma once

#include <stdexcept>
#include <string>

namespace capo {

// Base class for all library errors. Subclasses map onto the CLI exit
// codes: config errors exit 2, resource/IO errors exit 3, everything
// else surfaces as a check failure (exit 1).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller passed a value that violates a documented precondition.
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

// A size/budget guard tripped (enumeration budget, densify cap, sweep cap).
class ResourceError : public Error {
 public:
  using Error::Error;
};

// Non-finite intermediate, failed convergence, or similar numeric trouble.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// Collected data is missing a piece the computation needs (e.g. snapshots).
class DataError : public Error {
 public:
  using Error::Error;
};

// Bad or inconsistent run configuration; message carries the field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace capo
