#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rtn/autodiff.hpp"

namespace rtn::ad {

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = true;
  std::size_t worst_input = 0;  // index into the point list
  std::size_t worst_element = 0;
  double analytic = 0.0;  // gradient values at the worst element
  double numeric = 0.0;
};

// The function under test builds its output from the leaf Vars it is given.
// Non-scalar outputs are reduced by summation.
using CheckedFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

namespace detail {

inline double eval_scalar(const CheckedFn& fn, const std::vector<Tensor<double>>& point) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& p : point) leaves.push_back(tape.leaf(p, false));
  Var<double> out = fn(tape, leaves);
  double s = 0.0;
  for (double v : out.value().data()) s += v;
  return s;
}

}  // namespace detail

// Compares reverse-mode gradients against central finite differences.
// Per-element error is |a - n| / max(|a|, |n|, 1e-8); the report carries the
// maximum over every element of every input. Callers pick points away from
// non-differentiable loci (sign/abs at zero, clip bounds, interpolation
// knots), where the two derivatives legitimately disagree.
inline GradCheckReport grad_check(const CheckedFn& fn, const std::vector<Tensor<double>>& point, double step = 1e-4,
                                  double tolerance = 1e-4) {
  Tape<double> tape;
  std::vector<Var<double>> leaves;
  for (const auto& p : point) leaves.push_back(tape.leaf(p, true));
  Var<double> out = fn(tape, leaves);
  Var<double> total = out.shape().empty() ? out : sum(out);
  tape.backward(total);

  GradCheckReport report;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const Tensor<double> analytic = tape.grad(leaves[i]);
    std::vector<Tensor<double>> probe = point;
    for (std::size_t e = 0; e < point[i].size(); ++e) {
      const double x0 = point[i][e];
      probe[i][e] = x0 + step;
      const double fp = detail::eval_scalar(fn, probe);
      probe[i][e] = x0 - step;
      const double fm = detail::eval_scalar(fn, probe);
      probe[i][e] = x0;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[e];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = i;
        report.worst_element = e;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace rtn::ad
