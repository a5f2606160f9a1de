#pragma once

#include <cstddef>
#include <functional>

#include "cmcl/autodiff.hpp"

namespace cmcl {

/// Builds a scalar loss on `tape` from the flat parameter vector `theta`.
using ScalarFn = std::function<Var(Tape& tape, Var theta)>;

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t coordinates_checked = 0;
};

/// Relative error used by gradient_check: |a - n| / max(1, |a|, |n|).
/// Falls back to absolute error for gradients smaller than one, where
/// finite-difference roundoff dominates a pure ratio.
double gradient_rel_error(double analytic, double numeric);

/// Compares the propagated gradient of `f` at `theta` with the central
/// difference (f(theta + h e_k) - f(theta - h e_k)) / 2h for every k.
/// Throws ProbeError if f is non-finite at any probe point.
GradCheckReport gradient_check(const ScalarFn& f, const Tensor& theta, double h = 1e-6,
                               double tol = 1e-5);

}  // namespace cmcl
