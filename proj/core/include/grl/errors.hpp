#pragma once

#include <stdexcept>
#include <string>

namespace grl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where finite values are required, or a diverging computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters or geometry.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Internal consistency failure, e.g. a partition that does not tile its map.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

}  // namespace grl
