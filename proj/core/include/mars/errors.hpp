#pragma once

#include <stdexcept>
#include <string>

namespace mars {

// Linear-algebra failure that survived all recovery attempts (e.g. the
// Cholesky jitter ladder). Maps to CLI exit code 3.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed external input (CSV cell, config file, model file). Maps to
// CLI exit code 2.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mars
