#pragma once

#include <stdexcept>
#include <string>

namespace ndbm2 {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extent products or ranks that do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Axis, amount or index outside the admissible range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition (e.g. L not divisible by chunk).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Model file errors, one class per malformed-input category.
class FormatError : public Error {
 public:
  using Error::Error;
};
class VersionError : public Error {
 public:
  using Error::Error;
};
class CorruptionError : public Error {
 public:
  using Error::Error;
};
class ValidationError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ndbm2
