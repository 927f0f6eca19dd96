#pragma once

#include <functional>
#include <span>
#include <vector>

#include "arseg/autograd.hpp"

namespace arseg::ad {

/// Builds a scalar on `tape` from leaves holding the supplied inputs.
using ScalarFn = std::function<Var(Tape& tape, std::span<const Var> inputs)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares tape gradients of `f` against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps), element by element over every input.
/// Relative error uses the denominator max(|analytic|, |numeric|, 1e-8).
///
/// Throws std::invalid_argument for eps outside [1e-6, 1e-2] and
/// NumericalError if any evaluation is non-finite.
GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps);

}  // namespace arseg::ad
