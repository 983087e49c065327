// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rasm {

/// Shape disagreement between operands (or an input that is too small).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Out-of-range coordinate or element index.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// A configuration that cannot be applied (bad field, incompatible sizes).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Caller broke an API precondition (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Metric evaluation failure (e.g. empty region selection).
class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during optimization.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File-level I/O errors. Each failure mode has its own type so callers
/// can tell a missing file from a corrupt one.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class FileNotFoundError : public IoError {
 public:
  using IoError::IoError;
};
class FormatError : public IoError {
 public:
  using IoError::IoError;
};
class UnsupportedFormatError : public IoError {
 public:
  using IoError::IoError;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace rasm
