#pragma once

#include <stdexcept>
#include <string>

namespace mtl {

// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Mismatched tensor shapes or an operation applied to an incompatible shape.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(what) {}
};

// A NaN or Inf entered the numeric pipeline. Trials catch this and record
// a diverged status instead of crashing the sweep.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& what) : Error(what) {}
};

// Invalid user-supplied configuration (specs, JSON configs, CLI arguments).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

// Malformed input file (IDX, CSV, checkpoint containers).
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error(what) {}
};

}  // namespace mtl
