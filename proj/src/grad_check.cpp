#include "arseg/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "arseg/errors.hpp"

namespace arseg::ad {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, false));
  const Var out = f(tape, leaves);
  if (out.value().size() != 1) throw ShapeError("grad_check: function must return a scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite forward value");
  return v;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-2)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-2], got " +
                                std::to_string(eps));
  }
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
    const Var out = f(tape, leaves);
    if (!std::isfinite(out.value()[0])) {
      throw NumericalError("grad_check: non-finite forward value");
    }
    tape.backward(out);
    for (const auto& l : leaves) analytic.push_back(l.grad());
  }

  GradCheckResult r;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + eps;
      const double fp = evaluate(f, probe);
      probe[k][i] = x0 - eps;
      const double fm = evaluate(f, probe);
      probe[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > r.max_relative_error) {
        r = {rel, k, i, a, numeric};
      }
    }
  }
  return r;
}

}  // namespace arseg::ad
