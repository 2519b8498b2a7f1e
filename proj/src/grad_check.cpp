#include "dkd/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace dkd {

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double step) {
  if (!(step > 0.0)) {
    throw ParameterError("grad_check: step must be positive");
  }
  PrecisionScope mode(Dtype::f64);
  const std::vector<double> x0 = point.to_vector();
  const Shape shape = point.shape();

  Tensor x = Tensor::from(shape, x0, Dtype::f64, true);
  const Tensor y = f(x);
  if (y.numel() != 1) {
    throw RankError("grad_check: function must be scalar-valued, got " + shape_string(y.shape()));
  }
  backward(y);

  GradCheckReport report;
  report.tape_grad = x.grad_vector();
  report.numeric_grad.resize(x0.size());
  report.rel_error.resize(x0.size());

  NoGradScope no_grad;
  std::vector<double> probe = x0;
  auto eval = [&](std::size_t i, double v) {
    probe[i] = v;
    const double out = f(Tensor::from(shape, probe, Dtype::f64)).item();
    probe[i] = x0[i];
    return out;
  };
  double total = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double hi = x0[i] + step;
    const double lo = x0[i] - step;
    // Divide by the perturbation actually representable at x0[i].
    const double numeric = (eval(i, hi) - eval(i, lo)) / (hi - lo);
    const double tape = report.tape_grad[i];
    const double denom = std::max({std::abs(tape), std::abs(numeric), kGradCheckFloor});
    const double rel = std::abs(tape - numeric) / denom;
    report.numeric_grad[i] = numeric;
    report.rel_error[i] = rel;
    total += rel;
    if (!(rel <= report.max_rel_error)) {
      report.max_rel_error = rel;
      report.max_index = i;
    }
  }
  report.mean_rel_error = x0.empty() ? 0.0 : total / static_cast<double>(x0.size());
  return report;
}

}  // namespace dkd
