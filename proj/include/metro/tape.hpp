#pragma once

// Reverse-mode tape. Each op appends one node holding the handles it needs
// for its backward closure; nodes are therefore in topological order and
// backward() walks them once in reverse.
//
// Broadcasting is limited to bias-style adds (add_bias, attention_mask_add);
// every other binary op requires identical shapes.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metro/errors.hpp"
#include "metro/kernels.hpp"
#include "metro/rng.hpp"
#include "metro/tensor.hpp"

namespace metro {

using IdList = std::vector<std::int32_t>;
using RowList = std::vector<std::size_t>;

template <typename T>
class Tape {
 public:
  using TensorT = Tensor<T>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(root)/d(root) = 1 and propagates. Leaf gradients accumulate
  // across calls; intermediate gradients are reset at the start of each call.
  void backward(const TensorT& root) {
    if (root.numel() != 1) throw DimensionError("backward() needs a scalar root, got " + to_string(root.shape()));
    if (!root.requires_grad()) return;
    ++epoch_;
    TensorT r = root;
    acc(r)[0] += T{1};
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->output.grad_epoch() != epoch_) continue;
      it->backward();
    }
  }

  // ---- elementwise -------------------------------------------------------

  TensorT add(const TensorT& a, const TensorT& b) {
    require_same(a, b, "add");
    TensorT out = make(a.shape(), {a, b});
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
    record(out, [this, a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) add_into(acc(a), g);
      if (b.requires_grad()) add_into(acc(b), g);
    });
    return out;
  }

  TensorT sub(const TensorT& a, const TensorT& b) {
    require_same(a, b, "sub");
    TensorT out = make(a.shape(), {a, b});
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] - y[i];
    record(out, [this, a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) add_into(acc(a), g);
      if (b.requires_grad()) {
        auto gb = acc(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
    return out;
  }

  TensorT mul(const TensorT& a, const TensorT& b) {
    require_same(a, b, "mul");
    TensorT out = make(a.shape(), {a, b});
    auto o = out.data();
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
    record(out, [this, a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = acc(a);
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = acc(b);
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
    return out;
  }

  TensorT scale(const TensorT& a, T s) {
    TensorT out = make(a.shape(), {a});
    auto o = out.data();
    auto x = a.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * s;
    record(out, [this, a, out, s]() mutable {
      auto g = out.grad();
      auto ga = acc(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
    return out;
  }

  // x[..., n] + bias[n]
  TensorT add_bias(const TensorT& x, const TensorT& bias) {
    const std::size_t n = bias.numel();
    if (x.rank() == 0 || x.shape().back() != n || bias.rank() != 1) {
      throw DimensionError("add_bias: " + to_string(x.shape()) + " vs bias " + to_string(bias.shape()));
    }
    TensorT out = make(x.shape(), {x, bias});
    auto o = out.data();
    auto xs = x.data();
    auto bs = bias.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xs[i] + bs[i % n];
    record(out, [this, x, bias, out, n]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) add_into(acc(x), g);
      if (bias.requires_grad()) {
        auto gb = acc(bias);
        for (std::size_t r = 0; r < g.size() / n; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
    });
    return out;
  }

  TensorT relu(const TensorT& x) {
    TensorT out = make(x.shape(), {x});
    auto o = out.data();
    auto xs = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xs[i] > T{0} ? xs[i] : T{0};
    record(out, [this, x, out]() mutable {
      auto g = out.grad();
      auto gx = acc(x);
      auto xs = x.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xs[i] > T{0}) gx[i] += g[i];
    });
    return out;
  }

  // Exact (erf) GeLU.
  TensorT gelu(const TensorT& x) {
    TensorT out = make(x.shape(), {x});
    auto o = out.data();
    auto xs = x.data();
    const T inv_sqrt2 = T{1} / std::sqrt(T{2});
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = T{0.5} * xs[i] * (T{1} + std::erf(xs[i] * inv_sqrt2));
    record(out, [this, x, out, inv_sqrt2]() mutable {
      auto g = out.grad();
      auto gx = acc(x);
      auto xs = x.data();
      const T inv_sqrt_2pi = T{1} / std::sqrt(T{2} * T{3.14159265358979323846});
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xs[i];
        const T cdf = T{0.5} * (T{1} + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T{-0.5} * v * v);
#ifdef METRO_MUTATE_GELU_GRAD
        gx[i] += g[i] * cdf;  // deliberately wrong; exercised by the mutation test
        (void)pdf;
#else
        gx[i] += g[i] * (cdf + v * pdf);
#endif
      }
    });
    return out;
  }

  // Inverted dropout; identity (same handle) when p == 0 or not training.
  TensorT dropout(const TensorT& x, T p, const DropoutKey& key, bool training = true) {
    if (p < T{0} || p >= T{1}) throw ConfigError("dropout probability must be in [0,1)");
    if (!training || p == T{0}) return x;
    TensorT out = make(x.shape(), {x});
    const T keep_scale = T{1} / (T{1} - p);
    const auto gen = key.generator();
    const auto domain = key.domain();
    auto o = out.data();
    auto xs = x.data();
    std::vector<std::uint8_t> keep(o.size());
    std::vector<float> u(o.size());
    gen.fill_uniformf(domain, 0, u.size(), u.data());
    for (std::size_t i = 0; i < o.size(); ++i) {
      keep[i] = static_cast<T>(u[i]) >= p;
      o[i] = keep[i] ? xs[i] * keep_scale : T{0};
    }
    record(out, [this, x, out, keep = std::move(keep), keep_scale]() mutable {
      auto g = out.grad();
      auto gx = acc(x);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (keep[i]) gx[i] += g[i] * keep_scale;
    });
    return out;
  }

  // ---- shape ---------------------------------------------------------------

  TensorT reshape(const TensorT& x, Shape shape) {
    if (metro::numel(shape) != x.numel())
      throw DimensionError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
    TensorT out = make(std::move(shape), {x});
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    record(out, [this, x, out]() mutable { add_into(acc(x), out.grad()); });
    return out;
  }

  // General axis permutation: out.shape[i] = x.shape[perm[i]]. Optionally x
  // is first viewed as `view` and the result reshaped to `result`, which
  // folds reshape-permute-reshape chains into one copy.
  TensorT permute(const TensorT& x, const std::vector<std::size_t>& perm, const Shape& view = {},
                  const Shape& result = {}) {
    const Shape in_shape = view.empty() ? x.shape() : view;
    if (metro::numel(in_shape) != x.numel())
      throw DimensionError("permute: cannot view " + to_string(x.shape()) + " as " + to_string(in_shape));
    const std::size_t r = in_shape.size();
    if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + to_string(in_shape));
    std::vector<bool> seen(r, false);
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) {
      if (perm[i] >= r || seen[perm[i]]) throw DimensionError("permute: invalid axis permutation");
      seen[perm[i]] = true;
      out_shape[i] = in_shape[perm[i]];
    }
    if (!result.empty()) {
      if (metro::numel(result) != x.numel())
        throw DimensionError("permute: cannot reshape " + to_string(out_shape) + " to " + to_string(result));
      out_shape = result;
    }
    const auto map = permute_offsets(in_shape, perm);
    TensorT out = make(out_shape, {x});
    auto o = out.data();
    auto xs = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xs[map[i]];
    record(out, [this, x, out, map]() mutable {
      auto g = out.grad();
      auto gx = acc(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[map[i]] += g[i];
    });
    return out;
  }

  TensorT transpose2d(const TensorT& x) {
    if (x.rank() != 2) throw DimensionError("transpose2d: expected rank 2, got " + to_string(x.shape()));
    return permute(x, {1, 0});
  }

  // ---- reductions ----------------------------------------------------------

  TensorT sum(const TensorT& x) {
    TensorT out = make(Shape{}, {x});
    T s{0};
    for (T v : x.data()) s += v;
    out.data()[0] = s;
    record(out, [this, x, out]() mutable {
      const T g = out.grad()[0];
      for (auto& v : acc(x)) v += g;
    });
    return out;
  }

  TensorT mean(const TensorT& x) {
    if (x.numel() == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(x), T{1} / static_cast<T>(x.numel()));
  }

  // ---- linear algebra ------------------------------------------------------

  // a[m x k] * b[k x n], or a * b^T with b[n x k] when transpose_b.
  TensorT matmul(const TensorT& a, const TensorT& b, bool transpose_b = false) {
    if (a.rank() != 2 || b.rank() != 2) {
      throw DimensionError("matmul expects rank-2 operands, got " + to_string(a.shape()) + " and " +
                           to_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1);
    const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
    const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
    if (k != kb) {
      throw DimensionError("matmul inner dimensions disagree: " + to_string(a.shape()) +
                           (transpose_b ? " x T" : " x ") + to_string(b.shape()));
    }
    TensorT out = make({m, n}, {a, b});
    mm_forward(a.ptr(), b.ptr(), out.ptr(), 1, m, n, k, transpose_b);
    record(out, [this, a, b, out, m, n, k, transpose_b]() mutable {
      mm_backward(a, b, out, 1, m, n, k, transpose_b);
    });
    return out;
  }

  // x[..., k] * w[k x n] (+ bias[n]) -> [..., n]
  TensorT linear(const TensorT& x, const TensorT& w, const TensorT* bias = nullptr) {
    if (w.rank() != 2 || x.rank() == 0 || x.shape().back() != w.dim(0)) {
      throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
    }
    const std::size_t k = w.dim(0), n = w.dim(1), m = x.numel() / k;
    Shape out_shape = x.shape();
    out_shape.back() = n;
    TensorT out = make(out_shape, {x, w});
    mm_forward(x.ptr(), w.ptr(), out.ptr(), 1, m, n, k, false);
    record(out, [this, x, w, out, m, n, k]() mutable { mm_backward(x, w, out, 1, m, n, k, false); });
    if (bias) return add_bias(out, *bias);
    return out;
  }

  // Batched: a[N x m x k] * b[N x k x n] (or b[N x n x k] transposed).
  TensorT bmm(const TensorT& a, const TensorT& b, bool transpose_b = false) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
      throw DimensionError("bmm: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    if (k != kb) throw DimensionError("bmm inner dimensions disagree: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    TensorT out = make({batch, m, n}, {a, b});
    mm_forward(a.ptr(), b.ptr(), out.ptr(), batch, m, n, k, transpose_b);
    record(out, [this, a, b, out, batch, m, n, k, transpose_b]() mutable {
      mm_backward(a, b, out, batch, m, n, k, transpose_b);
    });
    return out;
  }

  // ---- normalization -------------------------------------------------------

  TensorT softmax(const TensorT& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + to_string(x.shape()));
    const auto [outer, len, inner] = split_axis(x.shape(), axis);
    TensorT out = make(x.shape(), {x});
    auto xs = x.data();
    auto ys = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
          const T v = xs[base + j * inner];
          if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
          mx = std::max(mx, v);
        }
        T s{0};
        for (std::size_t j = 0; j < len; ++j) {
          const T e = std::exp(xs[base + j * inner] - mx);
          ys[base + j * inner] = e;
          s += e;
        }
        const T inv = T{1} / s;
        for (std::size_t j = 0; j < len; ++j) ys[base + j * inner] *= inv;
      }
    }
    record(out, [this, x, out, outer, len, inner]() mutable {
      auto g = out.grad();
      auto ys = out.data();
      auto gx = acc(x);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot{0};
          for (std::size_t j = 0; j < len; ++j) dot += g[base + j * inner] * ys[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += ys[idx] * (g[idx] - dot);
          }
        }
      }
    });
    return out;
  }

  // Log-softmax over the last axis.
  TensorT log_softmax(const TensorT& x) {
    if (x.rank() == 0) throw DimensionError("log_softmax of a scalar");
    const std::size_t len = x.shape().back(), rows = x.numel() / len;
    TensorT out = make(x.shape(), {x});
    auto xs = x.data();
    auto ys = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T lse = log_sum_exp(xs.subspan(r * len, len));
      for (std::size_t j = 0; j < len; ++j) ys[r * len + j] = xs[r * len + j] - lse;
    }
    record(out, [this, x, out, rows, len]() mutable {
      auto g = out.grad();
      auto ys = out.data();
      auto gx = acc(x);
      for (std::size_t r = 0; r < rows; ++r) {
        T gs{0};
        for (std::size_t j = 0; j < len; ++j) gs += g[r * len + j];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t i = r * len + j;
          gx[i] += g[i] - std::exp(ys[i]) * gs;
        }
      }
    });
    return out;
  }

  // Normalizes the last axis: gamma * (x - mean) / sqrt(var + eps) + beta.
  TensorT layer_norm(const TensorT& x, const TensorT& gamma, const TensorT& beta, T eps) {
    if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
    if (x.rank() == 0) throw DimensionError("layer_norm of a scalar");
    const std::size_t d = x.shape().back(), rows = x.numel() / d;
    if (gamma.numel() != d || beta.numel() != d) {
      throw DimensionError("layer_norm: gamma/beta " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                           " vs input " + to_string(x.shape()));
    }
    TensorT out = make(x.shape(), {x, gamma, beta});
    std::vector<T> xhat(x.numel()), rstd(rows);
    auto xs = x.data();
    auto ys = out.data();
    auto gs = gamma.data();
    auto bs = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = xs.data() + r * d;
      T mu{0};
      for (std::size_t j = 0; j < d; ++j) mu += row[j];
      mu /= static_cast<T>(d);
      T var{0};
      for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<T>(d);
      const T rs = T{1} / std::sqrt(var + eps);
      rstd[r] = rs;
      for (std::size_t j = 0; j < d; ++j) {
        const T h = (row[j] - mu) * rs;
        xhat[r * d + j] = h;
        ys[r * d + j] = h * gs[j] + bs[j];
      }
    }
    record(out, [this, x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
      auto g = out.grad();
      auto gs = gamma.data();
      if (gamma.requires_grad()) {
        auto gg = acc(gamma);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
      }
      if (beta.requires_grad()) {
        auto gb = acc(beta);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
      if (x.requires_grad()) {
        auto gx = acc(x);
        for (std::size_t r = 0; r < rows; ++r) {
          T m1{0}, m2{0};
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * gs[j];
            m1 += dh;
            m2 += dh * xhat[r * d + j];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * gs[j];
            gx[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
          }
        }
      }
    });
    return out;
  }

  // ---- gathers -------------------------------------------------------------

  // table[V x d] rows at ids -> [ids.size() x d]
  TensorT embedding(const TensorT& table, const IdList& ids) {
    if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + to_string(table.shape()));
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab)
        throw DataError("embedding id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
    TensorT out = make({ids.size(), d}, {table});
    auto t = table.data();
    auto o = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
    record(out, [this, table, out, ids, d]() mutable {
      auto g = out.grad();
      auto gt = acc(table);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        T* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
        const T* src = g.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
    return out;
  }

  // Rows of x viewed as [numel/d x d] where d is the last dimension.
  TensorT gather_rows(const TensorT& x, const RowList& rows) {
    if (x.rank() == 0) throw DimensionError("gather_rows of a scalar");
    const std::size_t d = x.shape().back(), n = x.numel() / d;
    for (auto r : rows)
      if (r >= n) throw DimensionError("gather_rows: row " + std::to_string(r) + " of " + std::to_string(n));
    TensorT out = make({rows.size(), d}, {x});
    auto xs = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(xs.data() + rows[i] * d, d, o.data() + i * d);
    record(out, [this, x, out, rows, d]() mutable {
      auto g = out.grad();
      auto gx = acc(x);
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gx[rows[i] * d + j] += g[i * d + j];
    });
    return out;
  }

  // ---- attention helpers ---------------------------------------------------

  // Builds [H x L x L] from a per-head bucket table [H x bins]. With reset,
  // row 0 takes theta_query[h] and column 0 (rows >= 1) takes theta_key[h].
  TensorT relative_bias(const TensorT& table, const IdList& buckets, std::size_t seq_len, const TensorT& theta_query,
                        const TensorT& theta_key, bool reset_cls) {
    if (table.rank() != 2) throw DimensionError("relative_bias: table must be [heads x bins]");
    const std::size_t heads = table.dim(0), bins = table.dim(1);
    if (buckets.size() != seq_len * seq_len) throw DimensionError("relative_bias: bucket grid size mismatch");
    if (theta_query.numel() != heads || theta_key.numel() != heads)
      throw DimensionError("relative_bias: reset scalars must have one entry per head");
    TensorT out = make({heads, seq_len, seq_len}, {table, theta_query, theta_key});
    auto tb = table.data();
    auto tq = theta_query.data();
    auto tk = theta_key.data();
    auto o = out.data();
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq_len; ++i) {
        for (std::size_t j = 0; j < seq_len; ++j) {
          T v;
          if (reset_cls && i == 0) v = tq[h];
          else if (reset_cls && j == 0) v = tk[h];
          else v = tb[h * bins + static_cast<std::size_t>(buckets[i * seq_len + j])];
          o[(h * seq_len + i) * seq_len + j] = v;
        }
      }
    }
    record(out, [this, table, theta_query, theta_key, out, buckets, heads, bins, seq_len, reset_cls]() mutable {
      auto g = out.grad();
      std::span<T> gt, gq, gk;
      if (table.requires_grad()) gt = acc(table);
      if (reset_cls && theta_query.requires_grad()) gq = acc(theta_query);
      if (reset_cls && theta_key.requires_grad()) gk = acc(theta_key);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < seq_len; ++i) {
          for (std::size_t j = 0; j < seq_len; ++j) {
            const T v = g[(h * seq_len + i) * seq_len + j];
            if (reset_cls && i == 0) {
              if (!gq.empty()) gq[h] += v;
            } else if (reset_cls && j == 0) {
              if (!gk.empty()) gk[h] += v;
            } else if (!gt.empty()) {
              gt[h * bins + static_cast<std::size_t>(buckets[i * seq_len + j])] += v;
            }
          }
        }
      }
    });
    return out;
  }

  // scores[B x H x L x L] + bias[H x L x L] + padding mask over keys.
  // key_pad[b * L + j] != 0 marks a padded key; it receives `mask_value`.
  TensorT attention_mask_add(const TensorT& scores, const TensorT& bias, const std::vector<std::uint8_t>& key_pad,
                             T mask_value = T{-1e9}) {
    if (scores.rank() != 4 || bias.rank() != 3 || scores.dim(1) != bias.dim(0) || scores.dim(2) != bias.dim(1) ||
        scores.dim(3) != bias.dim(2)) {
      throw DimensionError("attention_mask_add: scores " + to_string(scores.shape()) + " vs bias " +
                           to_string(bias.shape()));
    }
    const std::size_t batch = scores.dim(0), heads = scores.dim(1), lq = scores.dim(2), lk = scores.dim(3);
    if (key_pad.size() != batch * lk) throw DimensionError("attention_mask_add: padding mask size mismatch");
    TensorT out = make(scores.shape(), {scores, bias});
    auto s = scores.data();
    auto bs = bias.data();
    auto o = out.data();
    const std::size_t plane = heads * lq * lk;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t r = 0; r < heads * lq; ++r) {
        for (std::size_t j = 0; j < lk; ++j) {
          const std::size_t idx = b * plane + r * lk + j;
          o[idx] = s[idx] + bs[r * lk + j] + (key_pad[b * lk + j] ? mask_value : T{0});
        }
      }
    }
    record(out, [this, scores, bias, out, batch, plane]() mutable {
      auto g = out.grad();
      if (scores.requires_grad()) add_into(acc(scores), g);
      if (bias.requires_grad()) {
        auto gb = acc(bias);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < plane; ++i) gb[i] += g[b * plane + i];
      }
    });
    return out;
  }

  // ---- losses --------------------------------------------------------------

  // Mean negative log-likelihood of targets over the selected rows of
  // logits[n x V] (all rows when `rows` is empty-optional).
  TensorT cross_entropy(const TensorT& logits, const IdList& targets, const std::optional<RowList>& rows = std::nullopt) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [n x V], got " + to_string(logits.shape()));
    const std::size_t n = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != n) throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
    RowList sel;
    if (rows) {
      sel = *rows;
    } else {
      sel.resize(n);
      std::iota(sel.begin(), sel.end(), std::size_t{0});
    }
    if (sel.empty()) throw DataError("cross_entropy: empty selection");
    for (auto r : sel) {
      if (r >= n) throw DataError("cross_entropy: row " + std::to_string(r) + " out of range");
      if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
        throw DataError("cross_entropy: target " + std::to_string(targets[r]) + " outside [0," + std::to_string(vocab) + ")");
    }
    TensorT out = make(Shape{}, {logits});
    auto xs = logits.data();
    T total{0};
    std::vector<T> lse(sel.size());
    for (std::size_t i = 0; i < sel.size(); ++i) {
      const std::size_t r = sel[i];
      lse[i] = log_sum_exp(xs.subspan(r * vocab, vocab));
      total += lse[i] - xs[r * vocab + static_cast<std::size_t>(targets[r])];
    }
    const T inv_count = T{1} / static_cast<T>(sel.size());
    out.data()[0] = total * inv_count;
    record(out, [this, logits, out, targets, sel = std::move(sel), lse = std::move(lse), vocab, inv_count]() mutable {
      const T g = out.grad()[0] * inv_count;
      auto gx = acc(logits);
      auto xs = logits.data();
      for (std::size_t i = 0; i < sel.size(); ++i) {
        const std::size_t r = sel[i];
        for (std::size_t j = 0; j < vocab; ++j) gx[r * vocab + j] += g * std::exp(xs[r * vocab + j] - lse[i]);
        gx[r * vocab + static_cast<std::size_t>(targets[r])] -= g;
      }
    });
    return out;
  }

  // Mean of -[y log s(z) + (1-y) log(1-s(z))] in log-space, over selected
  // entries of the flattened logits.
  TensorT bce_with_logits(const TensorT& logits, const std::vector<std::uint8_t>& labels,
                          const std::optional<RowList>& rows = std::nullopt) {
    const std::size_t n = logits.numel();
    if (labels.size() != n) throw DimensionError("bce_with_logits: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " logits");
    for (auto y : labels)
      if (y > 1) throw DataError("bce_with_logits: labels must be 0 or 1");
    RowList sel;
    if (rows) {
      sel = *rows;
    } else {
      sel.resize(n);
      std::iota(sel.begin(), sel.end(), std::size_t{0});
    }
    if (sel.empty()) throw DataError("bce_with_logits: empty selection");
    for (auto r : sel)
      if (r >= n) throw DataError("bce_with_logits: index out of range");
    TensorT out = make(Shape{}, {logits});
    auto zs = logits.data();
    T total{0};
    for (auto r : sel) {
      const T z = zs[r];
      total += std::max(z, T{0}) - z * static_cast<T>(labels[r]) + std::log1p(std::exp(-std::abs(z)));
    }
    const T inv_count = T{1} / static_cast<T>(sel.size());
    out.data()[0] = total * inv_count;
    record(out, [this, logits, out, labels, sel = std::move(sel), inv_count]() mutable {
      const T g = out.grad()[0] * inv_count;
      auto gz = acc(logits);
      auto zs = logits.data();
      for (auto r : sel) gz[r] += g * (sigmoid(zs[r]) - static_cast<T>(labels[r]));
    });
    return out;
  }

  // Mean over rows of KL(softmax(p) || softmax(q)) for logits [n x K],
  // accumulated in double.
  TensorT kl_div_logits(const TensorT& p_logits, const TensorT& q_logits) {
    require_same(p_logits, q_logits, "kl_div_logits");
    if (p_logits.rank() != 2 || p_logits.dim(0) == 0) throw DimensionError("kl_div_logits: logits must be [n x K] with n > 0");
    const std::size_t n = p_logits.dim(0), k = p_logits.dim(1);
    TensorT out = make(Shape{}, {p_logits, q_logits});
    auto ps = p_logits.data();
    auto qs = q_logits.data();
    auto log_probs = [k](std::span<const T> z, std::size_t r, std::vector<double>& lp) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        if (!std::isfinite(z[r * k + j])) throw NumericError("kl_div_logits: non-finite input");
        mx = std::max(mx, static_cast<double>(z[r * k + j]));
      }
      double s = 0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(static_cast<double>(z[r * k + j]) - mx);
      const double lse = mx + std::log(s);
      for (std::size_t j = 0; j < k; ++j) lp[j] = static_cast<double>(z[r * k + j]) - lse;
    };
    std::vector<double> lp(k), lq(k);
    std::vector<T> grad_p(n * k), grad_q(n * k);  // per unit upstream gradient
    double total = 0;
    for (std::size_t r = 0; r < n; ++r) {
      log_probs(ps, r, lp);
      log_probs(qs, r, lq);
      double kl = 0;
      for (std::size_t j = 0; j < k; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
      total += kl;
      for (std::size_t j = 0; j < k; ++j) {
        const double p = std::exp(lp[j]);
        grad_p[r * k + j] = static_cast<T>(p * (lp[j] - lq[j] - kl));
        grad_q[r * k + j] = static_cast<T>(std::exp(lq[j]) - p);
      }
    }
    const T inv_n = T{1} / static_cast<T>(n);
    out.data()[0] = static_cast<T>(total / static_cast<double>(n));
    record(out, [this, p_logits, q_logits, out, gp = std::move(grad_p), gq = std::move(grad_q), inv_n]() mutable {
      const T g = out.grad()[0] * inv_n;
      if (p_logits.requires_grad()) {
        auto dp = acc(p_logits);
        for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += g * gp[i];
      }
      if (q_logits.requires_grad()) {
        auto dq = acc(q_logits);
        for (std::size_t i = 0; i < dq.size(); ++i) dq[i] += g * gq[i];
      }
    });
    return out;
  }

  static T sigmoid(T z) {
    if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
    const T e = std::exp(z);
    return e / (T{1} + e);
  }

  static T log_sum_exp(std::span<const T> xs) {
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : xs) {
      if (!std::isfinite(v)) throw NumericError("log_sum_exp: non-finite input");
      mx = std::max(mx, v);
    }
    T s{0};
    for (T v : xs) s += std::exp(v - mx);
    return mx + std::log(s);
  }

 private:
  struct Node {
    TensorT output;
    std::function<void()> backward;
  };

  TensorT make(Shape shape, std::initializer_list<TensorT> inputs) {
    bool rg = false;
    for (const auto& t : inputs) rg = rg || t.requires_grad();
    TensorT out(std::move(shape), rg);
    if (rg) out.mark_intermediate();
    return out;
  }

  template <typename F>
  void record(TensorT& out, F&& fn) {
    if (!out.requires_grad()) return;
    nodes_.push_back({out, std::function<void()>(std::forward<F>(fn))});
  }

  // Gradient buffer of `t` for the current backward pass.
  std::span<T> acc(const TensorT& handle) {
    TensorT t = handle;
    auto g = t.grad();
    if (t.grad_epoch() != epoch_) {
      if (!t.is_leaf()) std::fill(g.begin(), g.end(), T{0});
      t.grad_epoch() = epoch_;
    }
    return g;
  }

  static void add_into(std::span<T> dst, std::span<const T> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  static void add_into(std::span<T> dst, std::span<T> src) { add_into(dst, std::span<const T>(src)); }

  static void require_same(const TensorT& a, const TensorT& b, const char* op) {
    if (a.shape() != b.shape())
      throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }

  struct AxisSplit {
    std::size_t outer, len, inner;
  };
  static AxisSplit split_axis(const Shape& s, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return {outer, s[axis], inner};
  }

  static std::vector<std::size_t> permute_offsets(const Shape& in_shape, const std::vector<std::size_t>& perm) {
    const std::size_t r = in_shape.size();
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
    Shape out_shape(r);
    std::vector<std::size_t> step(r);
    for (std::size_t i = 0; i < r; ++i) {
      out_shape[i] = in_shape[perm[i]];
      step[i] = in_stride[perm[i]];
    }
    std::vector<std::size_t> map(metro::numel(in_shape));
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < map.size(); ++i) {
      map[i] = off;
      for (std::size_t ax = r; ax-- > 0;) {
        if (++idx[ax] < out_shape[ax]) {
          off += step[ax];
          break;
        }
        off -= step[ax] * (out_shape[ax] - 1);
        idx[ax] = 0;
      }
    }
    return map;
  }

  void mm_forward(const T* a, const T* b, T* c, std::size_t batch, std::size_t m, std::size_t n, std::size_t k,
                  bool transpose_b) {
    for (std::size_t s = 0; s < batch; ++s) {
      const T* as = a + s * m * k;
      const T* bs = b + s * k * n;
      T* cs = c + s * m * n;
      if (transpose_b) kernels::gemm_nt(m, n, k, as, bs, cs, false, scratch_);
      else kernels::gemm_nn(m, n, k, as, bs, cs, false);
    }
  }

  void mm_backward(const TensorT& a, const TensorT& b, const TensorT& out, std::size_t batch, std::size_t m, std::size_t n,
                   std::size_t k, bool transpose_b) {
    const T* g = out.grad().data();
    if (a.requires_grad()) {
      T* ga = acc(a).data();
      for (std::size_t s = 0; s < batch; ++s) {
        // dA = dC * B^T   (or dC * B when B was transposed)
        if (transpose_b) kernels::gemm_nn(m, k, n, g + s * m * n, b.ptr() + s * k * n, ga + s * m * k, true);
        else kernels::gemm_nt(m, k, n, g + s * m * n, b.ptr() + s * k * n, ga + s * m * k, true, scratch_);
      }
    }
    if (b.requires_grad()) {
      T* gb = acc(b).data();
      for (std::size_t s = 0; s < batch; ++s) {
        // dB = A^T * dC   (or dC^T * A for the transposed layout)
        if (transpose_b) kernels::gemm_tn(n, k, m, g + s * m * n, a.ptr() + s * m * k, gb + s * k * n, true);
        else kernels::gemm_tn(k, n, m, a.ptr() + s * m * k, g + s * m * n, gb + s * k * n, true);
      }
    }
  }

  std::vector<Node> nodes_;
  std::uint64_t epoch_ = 0;
  std::vector<T> scratch_;
};

}  // namespace metro
