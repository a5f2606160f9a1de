#include "cmcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cmcl/errors.hpp"

namespace cmcl {

namespace {

double evaluate(const ScalarFn& f, const Tensor& theta, std::size_t coordinate) {
  Tape tape;
  const double v = f(tape, tape.constant(theta)).value().item();
  if (!std::isfinite(v)) {
    throw ProbeError("gradient_check: non-finite loss at coordinate " +
                         std::to_string(coordinate),
                     coordinate);
  }
  return v;
}

}  // namespace

double gradient_rel_error(double analytic, double numeric) {
  const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

GradCheckReport gradient_check(const ScalarFn& f, const Tensor& theta, double h, double tol) {
  Tape tape;
  Var p = tape.parameter(theta);
  Var loss = f(tape, p);
  const Tensor analytic = tape.backward(loss).of(p);

  GradCheckReport report;
  Tensor probe = theta;
  for (std::size_t k = 0; k < theta.size(); ++k) {
    probe[k] = theta[k] + h;
    const double up = evaluate(f, probe, k);
    probe[k] = theta[k] - h;
    const double down = evaluate(f, probe, k);
    probe[k] = theta[k];
    const double numeric = (up - down) / (2.0 * h);
    const double err = gradient_rel_error(analytic[k], numeric);
    if (err > report.max_rel_error || report.coordinates_checked == 0) {
      report.max_rel_error = err;
      report.worst_coordinate = k;
      report.analytic_at_worst = analytic[k];
      report.numeric_at_worst = numeric;
    }
    ++report.coordinates_checked;
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace cmcl
