#pragma once

#include <stdexcept>
#include <string>

namespace lets {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite entries, too few members, or an otherwise unusable ensemble.
class InvalidEnsemble : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// Matrix expected to be symmetric positive semi-definite is not.
class NotPsd : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// An iterative solver failed in a way that cannot be recovered.
class SolverError : public Error {
 public:
  using Error::Error;
};

/// A forecast left the range of finite numbers.
class FilterDivergence : public Error {
 public:
  using Error::Error;
};

/// Bad experiment configuration. `field()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

}  // namespace lets
