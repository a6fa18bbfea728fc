#pragma once

#include <stdexcept>
#include <string>

namespace lorm {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

/// Raised when a symmetric factorization fails even after the ridge is applied.
class SingularError : public Error {
 public:
  SingularError(const std::string& what, double pivot_ratio)
      : Error(what), pivot_ratio_(pivot_ratio) {}
  const char* kind() const noexcept override { return "singular"; }
  /// Smallest over largest pivot seen before the failure; a cheap conditioning proxy.
  double pivot_ratio() const noexcept { return pivot_ratio_; }

 private:
  double pivot_ratio_;
};

class DomainError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "domain"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

class ProtocolError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "protocol"; }
};

}  // namespace lorm
