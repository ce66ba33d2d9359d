#pragma once

#include <stdexcept>
#include <string>

namespace kpn {

// Root of everything the library throws on bad input. The CLI maps the
// subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters, unknown presets, impossible layer geometry.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing files, out-of-range labels.
class DataError : public Error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch, invalid };

  DataError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Training diverged (NaN/inf losses with no recovery path).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace kpn
