#pragma once

// Finite-difference checks for every differentiable tape op, each run over a
// batch of random instances with inputs drawn from [-2, 2].

#include <string>
#include <vector>

#include "metro/gradcheck.hpp"
#include "metro/rng.hpp"

namespace metro {

struct GradCheckCase {
  std::string op;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  bool passed = false;
};

namespace detail {

inline Tensor<double> random_tensor(RngStream& rng, Shape shape, bool requires_grad = true, double lo = -2.0,
                                    double hi = 2.0) {
  Tensor<double> t(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

inline std::size_t pick(RngStream& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

}  // namespace detail

// Runs `instances` random cases of each op; a case passes when every instance
// has relative error below `tol`.
inline std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 7, std::size_t instances = 20,
                                                     double tol = 1e-6, double h = 1e-5) {
  using detail::pick;
  using detail::random_tensor;
  using T = Tensor<double>;
  using Tp = Tape<double>;

  struct Builder {
    std::string name;
    std::function<std::pair<ScalarFn, std::vector<T>>(RngStream&)> make;
  };
  std::vector<Builder> builders;

  // Each builder returns the function under test and its inputs; the output
  // is always scalarized through fixed random projection weights.
  auto unary = [&](std::string name, std::function<T(Tp&, const T&)> op) {
    builders.push_back({std::move(name), [op](RngStream& rng) {
                          const Shape s{pick(rng, 1, 4), pick(rng, 2, 5)};
                          auto w = random_tensor(rng, s, false);
                          ScalarFn fn = [op, w](Tp& tape, std::vector<T>& in) { return project(tape, op(tape, in[0]), w); };
                          return std::make_pair(fn, std::vector<T>{random_tensor(rng, s)});
                        }});
  };
  auto binary = [&](std::string name, std::function<T(Tp&, const T&, const T&)> op) {
    builders.push_back({std::move(name), [op](RngStream& rng) {
                          const Shape s{pick(rng, 1, 4), pick(rng, 2, 5)};
                          auto w = random_tensor(rng, s, false);
                          ScalarFn fn = [op, w](Tp& tape, std::vector<T>& in) {
                            return project(tape, op(tape, in[0], in[1]), w);
                          };
                          return std::make_pair(fn, std::vector<T>{random_tensor(rng, s), random_tensor(rng, s)});
                        }});
  };

  binary("add", [](Tp& t, const T& a, const T& b) { return t.add(a, b); });
  binary("sub", [](Tp& t, const T& a, const T& b) { return t.sub(a, b); });
  binary("mul", [](Tp& t, const T& a, const T& b) { return t.mul(a, b); });
  unary("scale", [](Tp& t, const T& a) { return t.scale(a, -1.7); });
  unary("relu", [](Tp& t, const T& a) { return t.relu(a); });
  unary("gelu", [](Tp& t, const T& a) { return t.gelu(a); });
  unary("transpose", [](Tp& t, const T& a) { return t.transpose2d(t.transpose2d(a)); });
  unary("reshape", [](Tp& t, const T& a) { return t.reshape(t.reshape(a, {a.numel()}), a.shape()); });
  unary("softmax_axis0", [](Tp& t, const T& a) { return t.softmax(a, 0); });
  unary("softmax_axis1", [](Tp& t, const T& a) { return t.softmax(a, 1); });
  unary("log_softmax", [](Tp& t, const T& a) { return t.log_softmax(a); });

  builders.push_back({"kl_div_logits", [](RngStream& rng) {
                        const Shape s{pick(rng, 1, 4), pick(rng, 2, 5)};
                        ScalarFn fn = [](Tp& tape, std::vector<T>& in) { return tape.kl_div_logits(in[0], in[1]); };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, s), random_tensor(rng, s)});
                      }});
  builders.push_back({"dropout", [](RngStream& rng) {
                        const Shape s{pick(rng, 2, 6), pick(rng, 2, 6)};
                        auto w = random_tensor(rng, s, false);
                        const DropoutKey key{rng(), rng(), 3};
                        ScalarFn fn = [w, key](Tp& tape, std::vector<T>& in) {
                          return project(tape, tape.dropout(in[0], 0.3, key), w);
                        };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, s)});
                      }});
  builders.push_back({"reduce_sum_mean", [](RngStream& rng) {
                        const Shape s{pick(rng, 1, 5), pick(rng, 1, 5)};
                        ScalarFn fn = [](Tp& tape, std::vector<T>& in) {
                          auto sq = tape.mul(in[0], in[0]);
                          return tape.add(tape.sum(sq), tape.scale(tape.mean(in[0]), 3.0));
                        };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, s)});
                      }});
  builders.push_back({"permute", [](RngStream& rng) {
                        const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
                        const Shape ps{s[0], s[2], s[1], s[3]};
                        auto w = random_tensor(rng, ps, false);
                        ScalarFn fn = [w](Tp& tape, std::vector<T>& in) {
                          return project(tape, tape.permute(in[0], {0, 2, 1, 3}), w);
                        };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, s)});
                      }});
  builders.push_back({"permute_view", [](RngStream& rng) {
                        const std::size_t b = pick(rng, 1, 3), l = pick(rng, 1, 3), h = pick(rng, 1, 3), dh = pick(rng, 1, 3);
                        auto w = random_tensor(rng, {b * h, l, dh}, false);
                        ScalarFn fn = [w, b, l, h, dh](Tp& tape, std::vector<T>& in) {
                          return project(tape, tape.permute(in[0], {0, 2, 1, 3}, {b, l, h, dh}, {b * h, l, dh}), w);
                        };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {b * l, h * dh})});
                      }});
  builders.push_back({"add_bias", [](RngStream& rng) {
                        const Shape s{pick(rng, 1, 4), pick(rng, 2, 5)};
                        auto w = random_tensor(rng, s, false);
                        ScalarFn fn = [w](Tp& tape, std::vector<T>& in) { return project(tape, tape.add_bias(in[0], in[1]), w); };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, s), random_tensor(rng, {s[1]})});
                      }});
  builders.push_back({"matmul", [](RngStream& rng) {
                        const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
                        auto w = random_tensor(rng, {m, n}, false);
                        ScalarFn fn = [w](Tp& tape, std::vector<T>& in) { return project(tape, tape.matmul(in[0], in[1]), w); };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {m, k}), random_tensor(rng, {k, n})});
                      }});
  builders.push_back({"matmul_transposed", [](RngStream& rng) {
                        const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 4);
                        auto w = random_tensor(rng, {m, n}, false);
                        ScalarFn fn = [w](Tp& tape, std::vector<T>& in) {
                          return project(tape, tape.matmul(in[0], in[1], true), w);
                        };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {m, k}), random_tensor(rng, {n, k})});
                      }});
  builders.push_back({"linear", [](RngStream& rng) {
                        const std::size_t b = pick(rng, 1, 3), l = pick(rng, 1, 3), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
                        auto w = random_tensor(rng, {b, l, n}, false);
                        ScalarFn fn = [w](Tp& tape, std::vector<T>& in) { return project(tape, tape.linear(in[0], in[1], &in[2]), w); };
                        return std::make_pair(
                            fn, std::vector<T>{random_tensor(rng, {b, l, k}), random_tensor(rng, {k, n}), random_tensor(rng, {n})});
                      }});
  builders.push_back({"bmm", [](RngStream& rng) {
                        const std::size_t nb = pick(rng, 1, 3), m = pick(rng, 1, 3), k = pick(rng, 1, 4), n = pick(rng, 1, 3);
                        const bool tb = rng.below(2) == 1;
                        auto w = random_tensor(rng, {nb, m, n}, false);
                        ScalarFn fn = [w, tb](Tp& tape, std::vector<T>& in) { return project(tape, tape.bmm(in[0], in[1], tb), w); };
                        const Shape bs = tb ? Shape{nb, n, k} : Shape{nb, k, n};
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {nb, m, k}), random_tensor(rng, bs)});
                      }});
  builders.push_back({"layer_norm", [](RngStream& rng) {
                        const std::size_t r = pick(rng, 1, 4), d = pick(rng, 3, 8);
                        auto w = random_tensor(rng, {r, d}, false);
                        ScalarFn fn = [w](Tp& tape, std::vector<T>& in) {
                          return project(tape, tape.layer_norm(in[0], in[1], in[2], 1e-5), w);
                        };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {r, d}), random_tensor(rng, {d}), random_tensor(rng, {d})});
                      }});
  builders.push_back({"embedding_lookup", [](RngStream& rng) {
                        const std::size_t vocab = pick(rng, 2, 6), d = pick(rng, 1, 4), n = pick(rng, 1, 6);
                        IdList ids(n);
                        for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(vocab));
                        auto w = random_tensor(rng, {n, d}, false);
                        ScalarFn fn = [w, ids](Tp& tape, std::vector<T>& in) { return project(tape, tape.embedding(in[0], ids), w); };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {vocab, d})});
                      }});
  builders.push_back({"gather_rows", [](RngStream& rng) {
                        const std::size_t n = pick(rng, 2, 6), d = pick(rng, 1, 4), k = pick(rng, 1, 5);
                        RowList rows(k);
                        for (auto& r : rows) r = rng.below(n);
                        auto w = random_tensor(rng, {k, d}, false);
                        ScalarFn fn = [w, rows](Tp& tape, std::vector<T>& in) { return project(tape, tape.gather_rows(in[0], rows), w); };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {n, d})});
                      }});
  builders.push_back({"relative_bias", [](RngStream& rng) {
                        const std::size_t heads = pick(rng, 1, 3), bins = pick(rng, 2, 5), len = pick(rng, 2, 4);
                        const bool reset = rng.below(2) == 1;
                        IdList buckets(len * len);
                        for (auto& b : buckets) b = static_cast<std::int32_t>(rng.below(bins));
                        auto w = random_tensor(rng, {heads, len, len}, false);
                        ScalarFn fn = [w, buckets, len, reset](Tp& tape, std::vector<T>& in) {
                          return project(tape, tape.relative_bias(in[0], buckets, len, in[1], in[2], reset), w);
                        };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {heads, bins}), random_tensor(rng, {heads}),
                                                                 random_tensor(rng, {heads})});
                      }});
  builders.push_back({"attention_mask_add", [](RngStream& rng) {
                        const std::size_t b = pick(rng, 1, 2), heads = pick(rng, 1, 2), len = pick(rng, 2, 3);
                        std::vector<std::uint8_t> pad(b * len, 0);
                        pad.back() = 1;
                        // Project through a softmax so masked keys get exactly zero weight.
                        auto w = random_tensor(rng, {b, heads, len, len}, false);
                        ScalarFn fn = [w, pad](Tp& tape, std::vector<T>& in) {
                          return project(tape, tape.softmax(tape.attention_mask_add(in[0], in[1], pad), 3), w);
                        };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {b, heads, len, len}),
                                                                 random_tensor(rng, {heads, len, len})});
                      }});
  builders.push_back({"cross_entropy", [](RngStream& rng) {
                        const std::size_t n = pick(rng, 2, 5), vocab = pick(rng, 2, 7);
                        IdList targets(n);
                        for (auto& t : targets) t = static_cast<std::int32_t>(rng.below(vocab));
                        RowList rows;
                        for (std::size_t i = 0; i < n; ++i)
                          if (rng.below(2) == 0 || i == 0) rows.push_back(i);
                        ScalarFn fn = [targets, rows](Tp& tape, std::vector<T>& in) { return tape.cross_entropy(in[0], targets, rows); };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {n, vocab})});
                      }});
  builders.push_back({"bce_with_logits", [](RngStream& rng) {
                        const std::size_t n = pick(rng, 2, 8);
                        std::vector<std::uint8_t> labels(n);
                        for (auto& y : labels) y = static_cast<std::uint8_t>(rng.below(2));
                        ScalarFn fn = [labels](Tp& tape, std::vector<T>& in) { return tape.bce_with_logits(in[0], labels); };
                        return std::make_pair(fn, std::vector<T>{random_tensor(rng, {n})});
                      }});

  std::vector<GradCheckCase> results;
  for (std::size_t b = 0; b < builders.size(); ++b) {
    RngStream rng(seed, "gradcheck", b);
    GradCheckCase c{builders[b].name, instances, 0.0, true};
    for (std::size_t i = 0; i < instances; ++i) {
      auto [fn, inputs] = builders[b].make(rng);
      const auto r = check_gradients(fn, inputs, h);
      c.max_rel_error = std::max(c.max_rel_error, r.max_rel_error);
    }
    c.passed = c.max_rel_error < tol;
    results.push_back(c);
  }
  return results;
}

}  // namespace metro
