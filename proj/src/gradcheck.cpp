#include "fern/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace fern {

double finite_difference_check(const std::function<Tensor()>& builder, std::vector<Tensor> params,
                               double h) {
  check(h > 0.0, "finite_difference_check: h must be positive");

  std::vector<std::vector<double>> analytic;
  {
    for (Tensor& p : params) p.zero_grad();
    Tape tape;
    Tensor loss = builder();
    tape.backward(loss);
    for (Tensor& p : params) {
      if (p.has_grad())
        analytic.push_back(p.grad_view());
      else
        analytic.emplace_back(static_cast<size_t>(p.numel()), 0.0);
      p.zero_grad();
    }
  }

  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    double* v = p.data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double fp = builder().scalar();  // no tape active: pure forward
      v[i] = saved - h;
      const double fm = builder().scalar();
      v[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi][static_cast<size_t>(i)];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
  }
  return max_rel;
}

}  // namespace fern
