#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "dkd/tensor.hpp"

namespace dkd {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::size_t max_index = 0;
  std::vector<double> tape_grad;
  std::vector<double> numeric_grad;
  std::vector<double> rel_error;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
// true derivative is ~0 from dominating the report.
inline constexpr double kGradCheckFloor = 1e-3;

// Compares the tape gradient of scalar-valued `f` at `point` against central
// differences. Runs in 64-bit mode regardless of the caller's mode; `point`
// is converted to f64.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                           double step = 1e-5);

}  // namespace dkd
