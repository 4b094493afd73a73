#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "metro/tape.hpp"

namespace metro {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> rel_error_per_input;
  bool passed(double tol) const { return max_rel_error < tol; }
};

// || a - b ||_2 / max(||a||_2, ||b||_2). Gradients that vanish on both sides
// (norm below 1e-7, e.g. a softmax-shift-invariant parameter) are compared
// absolutely instead, since their finite differences are pure roundoff.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  constexpr double kVanishing = 1e-7;
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom < kVanishing) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

// Compares tape gradients of a scalar function against central finite
// differences for every input with requires_grad set.
using ScalarFn = std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)>;

inline GradCheckResult check_gradients(const ScalarFn& fn, std::vector<Tensor<double>> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  {
    Tape<double> tape;
    auto loss = fn(tape, inputs);
    tape.backward(loss);
  }
  GradCheckResult result;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    auto xs = t.data();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double saved = xs[i];
      xs[i] = saved + h;
      double fp, fm;
      {
        Tape<double> tape;
        fp = fn(tape, inputs).item();
      }
      xs[i] = saved - h;
      {
        Tape<double> tape;
        fm = fn(tape, inputs).item();
      }
      xs[i] = saved;
      numeric[i] = (fp - fm) / (2.0 * h);
    }
    const double err = relative_error(analytic, numeric);
    result.rel_error_per_input.push_back(err);
    result.max_rel_error = std::max(result.max_rel_error, err);
  }
  return result;
}

// Scalarizes a tensor-valued output with fixed random weights so every
// output element contributes to the checked gradient.
inline Tensor<double> project(Tape<double>& tape, const Tensor<double>& y, const Tensor<double>& weights) {
  return tape.sum(tape.mul(y, weights));
}

}  // namespace metro
