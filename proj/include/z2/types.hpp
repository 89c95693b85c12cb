#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace z2 {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument was not met (bad range, bad shape, non-finite input).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A caller broke a protocol contract, e.g. stepping a state at the wrong index.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// An algebraic identity between solver coefficients failed to hold.
class DualityViolation : public Error {
 public:
  using Error::Error;
};

inline bool all_finite(const Vector& v) { return v.allFinite(); }

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidArgument(message);
}

}  // namespace z2
