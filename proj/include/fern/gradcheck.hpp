#pragma once

#include <functional>
#include <vector>

#include "fern/tensor.hpp"

namespace fern {

// Central-difference check of tape gradients for a deterministic scalar
// function of the given parameter tensors. Perturbs each coordinate by +-h,
// compares (f(p+h)-f(p-h))/(2h) against the recorded gradient, and returns
// the max relative error with denominator max(|analytic|, |numeric|, 1e-8).
double finite_difference_check(const std::function<Tensor()>& builder, std::vector<Tensor> params,
                               double h);

}  // namespace fern
