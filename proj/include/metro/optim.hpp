#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "metro/config.hpp"
#include "metro/errors.hpp"
#include "metro/tensor.hpp"

namespace metro {

// Linear warm-up to peak_lr, then linear decay to zero at max_steps.
inline double lr_at(std::int64_t step, const ScheduleConfig& s) {
  if (step <= 0) return 0.0;
  if (step <= s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.max_steps) return 0.0;
  return s.peak_lr * static_cast<double>(s.max_steps - step) / static_cast<double>(s.max_steps - s.warmup_steps);
}

struct ClipResult {
  double scale = 1.0;
  double norm = 0.0;  // before clipping
  bool clipped() const { return scale != 1.0; }
};

template <typename T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double sq = 0;
  for (const auto& p : params)
    if (p.has_grad())
      for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

// Joint L2 norm over every gradient; all are rescaled by clip/norm when the
// norm exceeds clip. Non-finite gradients raise NumericError untouched.
template <typename T>
ClipResult clip_gradients(const std::vector<Tensor<T>>& params, double clip_norm) {
  ClipResult r;
  r.norm = global_grad_norm(params);
  if (!std::isfinite(r.norm)) throw NumericError("gradient norm is not finite");
  if (r.norm > clip_norm) {
    r.scale = clip_norm / r.norm;
    const T s = static_cast<T>(r.scale);
    for (auto p : params)
      if (p.has_grad())
        for (T& g : p.grad()) g *= s;
  }
  return r;
}

template <typename T>
struct AdamState {
  OptimizerConfig config;
  std::int64_t t = 0;
  std::vector<std::vector<T>> m, v;

  static AdamState init(const OptimizerConfig& cfg, const std::vector<Tensor<T>>& params) {
    AdamState s;
    s.config = cfg;
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), T{0});
      s.v.emplace_back(p.numel(), T{0});
    }
    return s;
  }
};

// Decoupled weight decay (p -= lr * wd * p) followed by the bias-corrected
// Adam update. Arithmetic is done in double and stored back as T.
template <typename T>
void adam_step(const std::vector<Tensor<T>>& params, AdamState<T>& state, double lr) {
  if (state.m.size() != params.size()) throw DimensionError("adam_step: state does not match parameter list");
  const auto& c = state.config;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T> p = params[k];
    if (state.m[k].size() != p.numel()) throw DimensionError("adam_step: moment size mismatch");
    auto w = p.data();
    const bool has_grad = p.has_grad();
    const std::span<const T> gs = has_grad ? std::span<const T>(p.grad()) : std::span<const T>();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has_grad ? static_cast<double>(gs[i]) : 0.0;
      double x = static_cast<double>(w[i]);
      x -= lr * c.weight_decay * x;
      const double m = c.beta1 * static_cast<double>(state.m[k][i]) + (1.0 - c.beta1) * g;
      const double v = c.beta2 * static_cast<double>(state.v[k][i]) + (1.0 - c.beta2) * g * g;
      state.m[k][i] = static_cast<T>(m);
      state.v[k][i] = static_cast<T>(v);
      x -= lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
      w[i] = static_cast<T>(x);
    }
  }
}

}  // namespace metro
