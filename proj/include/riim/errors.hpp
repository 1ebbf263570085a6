#pragma once

#include <stdexcept>
#include <string>

namespace riim {

// Bad or malformed input: missing columns, non-binary treatment, wrong shapes.
// The CLI maps this family to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A design that the inference formulas do not cover (a set with
// min{m, n-m} != 1, probabilities outside (0,1), ...).
class DesignError : public InputError {
 public:
  using InputError::InputError;
};

// Numerical or feasibility failure: rank deficiency, leverage at 1,
// non-convergence, infeasible matching. The CLI maps this family to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InfeasibleError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

}  // namespace riim
