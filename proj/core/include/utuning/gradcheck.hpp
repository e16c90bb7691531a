#pragma once

#include <functional>

#include "utuning/autograd.hpp"
#include "utuning/tensor.hpp"

namespace utuning {

/// Central-difference gradient of a scalar-valued function, one coordinate
/// at a time: (f(x + h e_i) - f(x - h e_i)) / 2h.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& at,
                                  double h = 1e-5);

/// Worst relative error between an analytic and a numeric gradient.
/// Coordinates where both magnitudes fall below `abs_floor` count as exact.
double max_rel_err(const Tensor& analytic, const Tensor& numeric, double abs_floor = 1e-7);

/// Checks d(loss)/d(param) for one leaf of a rebuildable graph: `loss_fn`
/// must reconstruct the forward pass from current leaf values.
double check_gradient(const Var& param, const std::function<Var()>& loss_fn, double h = 1e-5);

}  // namespace utuning
