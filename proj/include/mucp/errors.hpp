#pragma once

#include <stdexcept>
#include <string>

namespace mucp {

/// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Out-of-range index (gather, scatter, token ids).
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Violated precondition of an operation (empty batch, non-scalar loss, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed configuration or checkpoint.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mucp
