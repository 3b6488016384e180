#pragma once

#include <functional>
#include <vector>

#include "mcfnet/graph.hpp"

namespace mcfnet {

struct GradCheckOptions {
  double h = 1e-5;
  // Lower bound on the |analytic| + |numeric| denominator. Coordinates whose
  // true gradient is ~0 otherwise compare roundoff against roundoff.
  double scale_floor = 1e-4;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

using ScalarFn = std::function<Tensor<double>(Graph<double>&)>;

/// Compares reverse-mode gradients of the scalar `f` with respect to every
/// tensor in `inputs` against central differences. Each coordinate's error is
/// |a - n| / max(|a| + |n|, scale_floor); the maximum is returned.
///
/// `f` must read the inputs by handle (it is re-evaluated after in-place
/// perturbation). Input gradients are overwritten.
GradCheckResult finite_diff_check(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                                  GradCheckOptions options = {});

/// Single-input form: f(graph, x).
GradCheckResult finite_diff_check(
    const std::function<Tensor<double>(Graph<double>&, const Tensor<double>&)>& f,
    const Tensor<double>& x, GradCheckOptions options = {});

}  // namespace mcfnet
