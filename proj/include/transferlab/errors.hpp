#pragma once

#include <stdexcept>
#include <string>

namespace tlab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// A representation (or any vector fed to a cosine) has norm below 1e-12.
class DegenerateEmbedding : public Error {
 public:
  using Error::Error;
};

class NonFiniteValue : public Error {
 public:
  using Error::Error;
};

/// Training or an attack produced NaN/Inf; the message names the hyperparameters.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class InsufficientData : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Binary file problems: bad magic, truncation, version mismatch, I/O.
class FormatError : public Error {
 public:
  enum class Kind { BadMagic, Truncated, VersionMismatch, Io };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace tlab
