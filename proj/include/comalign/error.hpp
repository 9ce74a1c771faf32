#pragma once

#include <stdexcept>
#include <string>

namespace comalign {

// Validation failures (bad shapes, bad config, malformed files) are
// distinguished from numerical failures so callers can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace comalign
