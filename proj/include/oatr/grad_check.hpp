#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "oatr/tensor.hpp"

namespace oatr {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
  double tolerance = 0.0;

  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  /// Lower bound on the error denominator so coordinates whose true
  /// gradient is ~0 are judged on absolute error.
  double denominator_floor = 1e-4;
};

/// Compares backward() against central differences for every coordinate of
/// every input. `inputs` must be leaves that `f` reads; they are perturbed in
/// place and restored. `f` must return a scalar.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs,
                                  const GradCheckOptions& options = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  const Tensor<double> out = f();
  if (out.size() != 1) {
    throw ContractError("grad_check: function must return a scalar, got shape " +
                        shape_string(out.shape()));
  }
  out.backward();

  GradCheckReport report;
  report.tolerance = options.tolerance;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    const Matrix<double> analytic = in.grad();
    auto& values = in.mutable_value();
    for (Index i = 0; i < values.size(); ++i) {
      const double saved = values.data()[i];
      values.data()[i] = saved + options.step;
      const double plus = f().item();
      values.data()[i] = saved - options.step;
      const double minus = f().item();
      values.data()[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic.data()[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
      const double err = std::abs(a - numeric) / denom;
      ++report.coordinates;
      if (err > report.max_rel_error || std::isnan(err)) {
        report.max_rel_error = std::isnan(err) ? INFINITY : err;
        report.worst_input = t;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace oatr
