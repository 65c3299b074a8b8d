#pragma once

#include <stdexcept>
#include <string>

namespace drs {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs violate a documented precondition (dimensions, ranges).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// The model is valid but the requested solver cannot handle it, e.g. a
/// generalized (tall noise gain) model passed to a path that needs Q^{-1}.
class UnsupportedModel : public Error {
 public:
  using Error::Error;
};

/// A matrix that must be invertible was not. `step` is the time index at
/// which the failure happened, or -1 when it is not tied to a step.
class SingularMatrix : public Error {
 public:
  SingularMatrix(const std::string& what, int step)
      : Error(what + (step >= 0 ? " (step " + std::to_string(step) + ")" : "")),
        step_(step) {}

  int step() const noexcept { return step_; }

 private:
  int step_;
};

}  // namespace drs
