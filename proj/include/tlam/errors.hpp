#pragma once

#include <stdexcept>
#include <string>

namespace tlam {

/// Malformed or truncated TLT1 / manifest input.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Read/write failure on a byte sink or source.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape, dtype or range disagreement between arguments.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// LabelSet / parameter binding invariant violated.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace tlam

namespace tlam {

/// Caller broke an API precondition (e.g. backward from a non-scalar node).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace tlam
