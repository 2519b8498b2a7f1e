#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dkd/grad_check.hpp"

namespace dkd {

// One finite-difference check of one differentiable input of one operation.
struct GradCheckCase {
  std::string op;
  std::string input;
  Shape shape;
  GradCheckReport report;
};

// Checks every primitive op and the distillation loss with respect to each
// differentiable input, at `shapes_per_op` random shapes each. Each case
// contracts the op output with fixed random weights to get a scalar.
std::vector<GradCheckCase> run_grad_battery(std::uint64_t seed, int shapes_per_op = 3, double step = 1e-5);

// op,input,shape,max_rel_error,mean_rel_error
std::string grad_battery_csv(const std::vector<GradCheckCase>& cases);

}  // namespace dkd
