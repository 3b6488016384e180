#include "mcfnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mcfnet {

GradCheckResult finite_diff_check(const ScalarFn& f, std::vector<Tensor<double>> inputs,
                                  GradCheckOptions options) {
  std::vector<bool> had_grad;
  for (auto& x : inputs) {
    had_grad.push_back(x.requires_grad());
    x.set_requires_grad(true);
    x.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Graph<double> g;
    const auto out = f(g);
    if (out.numel() != 1) {
      throw ShapeError("finite_diff_check: function must be scalar-valued, got shape " +
                       shape_str(out.shape()));
    }
    g.backward(out);
    for (const auto& x : inputs) analytic.emplace_back(x.grad().begin(), x.grad().end());
  }

  auto eval = [&f]() {
    Graph<double> g(false);
    return f(g).item();
  };

  GradCheckResult result;
  for (std::size_t q = 0; q < inputs.size(); ++q) {
    auto values = inputs[q].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + options.h;
      const double up = eval();
      values[i] = saved - options.h;
      const double down = eval();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.h);
      const double a = analytic[q][i];
      const double err =
          std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), options.scale_floor);
      if (err > result.max_rel_error || !std::isfinite(err)) {
        result.max_rel_error = std::isfinite(err) ? err : INFINITY;
        result.worst_input = q;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  for (std::size_t q = 0; q < inputs.size(); ++q) {
    if (!had_grad[q]) inputs[q].set_requires_grad(false);
  }
  return result;
}

GradCheckResult finite_diff_check(
    const std::function<Tensor<double>(Graph<double>&, const Tensor<double>&)>& f,
    const Tensor<double>& x, GradCheckOptions options) {
  Tensor<double> handle = x;
  return finite_diff_check([&](Graph<double>& g) { return f(g, handle); }, {handle}, options);
}

}  // namespace mcfnet
