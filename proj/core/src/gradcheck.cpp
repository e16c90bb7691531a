#include "utuning/gradcheck.hpp"

#include <cmath>

namespace utuning {

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& at,
                                  double h) {
  if (h <= 0) throw ContractError("finite_difference_gradient: h must be positive");
  Tensor grad(at.shape());
  Tensor x = at;
  for (int64_t i = 0; i < at.numel(); ++i) {
    double orig = x[i];
    x[i] = orig + h;
    double fp = f(x);
    x[i] = orig - h;
    double fm = f(x);
    x[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double max_rel_err(const Tensor& analytic, const Tensor& numeric, double abs_floor) {
  if (!analytic.same_shape(numeric)) {
    throw DimensionError("max_rel_err: shape mismatch " + shape_str(analytic.shape()) + " vs " +
                         shape_str(numeric.shape()));
  }
  double worst = 0.0;
  for (int64_t i = 0; i < analytic.numel(); ++i) {
    double a = analytic[i];
    double n = numeric[i];
    double diff = std::fabs(a - n);
    if (diff <= abs_floor) continue;
    worst = std::max(worst, diff / std::max(std::fabs(a), std::fabs(n)));
  }
  return worst;
}

double check_gradient(const Var& param, const std::function<Var()>& loss_fn, double h) {
  Var loss = loss_fn();
  zero_grad({param});
  backward(loss);
  Tensor analytic = param->grad;
  Tensor numeric = finite_difference_gradient(
      [&](const Tensor& theta) {
        Tensor saved = param->value;
        param->value = theta;
        double out = loss_fn()->value[0];
        param->value = saved;
        return out;
      },
      param->value, h);
  return max_rel_err(analytic, numeric);
}

}  // namespace utuning
