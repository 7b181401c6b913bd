#pragma once

#include <stdexcept>
#include <string>

namespace rest {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument outside its admissible range (e.g. t outside [0,1]).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Sequence lengths incompatible with the chunk layout.
class LayoutError : public Error {
 public:
  using Error::Error;
};

/// Time schedules that are not strictly decreasing.
class ScheduleError : public Error {
 public:
  using Error::Error;
};

/// Audio and video lengths that do not line up.
class AlignmentError : public Error {
 public:
  using Error::Error;
};

/// ID-Context cache contents that disagree with the current chunk layout.
class CacheError : public Error {
 public:
  using Error::Error;
};

/// API misuse: wrong mode, backward on a non-scalar, unknown config key.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf encountered where finite values are required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// File-format and filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace rest
