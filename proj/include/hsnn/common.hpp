#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hsnn {

using index_t = std::int64_t;  // row/col counts and array offsets
using col_t = std::int32_t;    // stored column indices

// Base class for all faults raised by this library. Violations found by
// validators are returned as data, not thrown.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(what) {}
};

// Nesting violated between two adjacent sparsity levels. Carries the first
// offending coordinate.
class HierarchyError : public Error {
 public:
  HierarchyError(const std::string& what, index_t level, index_t row, index_t col)
      : Error(what), level(level), row(row), col(col) {}
  index_t level;
  index_t row;
  index_t col;
};

class ValueMismatchError : public Error {
 public:
  ValueMismatchError(const std::string& what, index_t row, index_t col)
      : Error(what), row(row), col(col) {}
  index_t row;
  index_t col;
};

class LevelRangeError : public Error {
 public:
  explicit LevelRangeError(const std::string& what) : Error(what) {}
};

// Bad plan/config input (CLI maps this to a usage error).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what) {}
};

class TrainingDiverged : public Error {
 public:
  explicit TrainingDiverged(const std::string& what) : Error(what) {}
};

}  // namespace hsnn
