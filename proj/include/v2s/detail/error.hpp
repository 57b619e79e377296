#pragma once

#include <stdexcept>
#include <string>

namespace v2s {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: bad files, inconsistent shapes, out-of-range arguments.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure: divergence, inverted elements, line-search breakdown.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Raised when a deformation gradient has non-positive determinant.
class InvertedElementError : public NumericalError {
 public:
  InvertedElementError(const std::string& what, long index = -1)
      : NumericalError(what), index_(index) {}
  long index() const noexcept { return index_; }

 private:
  long index_;
};

namespace detail {

template <class E = InputError>
inline void require(bool condition, const std::string& message) {
  if (!condition) throw E(message);
}

}  // namespace detail
}  // namespace v2s
