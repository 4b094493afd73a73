#pragma once

// Release checks: finite-difference gradients of every op, loss identities,
// the memory planner against the reference table, PDR identities and
// fused/unfused kernel equivalence.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "metro/finetune.hpp"
#include "metro/fused_ops.hpp"
#include "metro/gradcheck_suite.hpp"
#include "metro/objectives.hpp"
#include "metro/zero_planner.hpp"

namespace metro {

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline std::string format_check(const VerifyCheck& c) {
  return std::string(c.passed ? "PASS" : "FAIL") + "  " + c.name + (c.detail.empty() ? "" : "  " + c.detail);
}

namespace detail {

inline std::string fmt(const char* format, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, a, b, c);
  return buf;
}

// Random finite halves covering subnormals, signed zeros and the top of the range.
inline std::vector<Half> edge_case_halves(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed, "verify-halves");
  std::vector<Half> x(n);
  for (auto& h : x) {
    std::uint16_t b;
    switch (rng.below(5)) {
      case 0: b = static_cast<std::uint16_t>(rng.below(0x400)); break;
      case 1: b = static_cast<std::uint16_t>(0x7b00 + rng.below(0x100)); break;
      case 2: b = 0; break;
      default: b = static_cast<std::uint16_t>(rng.below(0x7c00)); break;
    }
    if (rng.below(2)) b |= 0x8000u;
    h.bits = b;
  }
  return x;
}

}  // namespace detail

inline std::vector<VerifyCheck> verify_gradients(std::uint64_t seed = 7, std::size_t instances = 20) {
  std::vector<VerifyCheck> out;
  for (const auto& c : run_gradcheck_suite(seed, instances, 1e-6, 1e-5))
    out.push_back({"grad-check " + c.op, c.passed,
                   detail::fmt("max rel err %.3g over %g instances", c.max_rel_error, static_cast<double>(c.instances))});
  return out;
}

inline std::vector<VerifyCheck> verify_loss_identities() {
  std::vector<VerifyCheck> out;
  const double t = total_loss(2.0, 0.1, 3.0, 50.0, MainObjective::rtd_plus_sclm);
  out.push_back({"loss total(2.0, 0.1, 3.0, lambda=50) == 10.0", t == 10.0, detail::fmt("got %.17g", t)});
  const double tr = total_loss(2.0, 0.1, std::nullopt, 50.0, MainObjective::rtd_only);
  out.push_back({"loss rtd only drops the corrective term", tr == 7.0, detail::fmt("got %.17g", tr)});
  const double t0 = total_loss(2.0, 0.1, std::nullopt, 0.0, MainObjective::rtd_only);
  out.push_back({"loss lambda=0 leaves the auxiliary loss", t0 == 2.0, detail::fmt("got %.17g", t0)});

  Tape<double> tape;
  Tensor<double> logits({4, 260});
  const double ce = tape.cross_entropy(logits, IdList{5, 9, 100, 259}).item();
  out.push_back({"loss uniform logits give ln(V)", std::abs(ce - std::log(260.0)) < 1e-12,
                 detail::fmt("got %.17g, ln 260 = %.17g", ce, std::log(260.0))});
  Tensor<double> z({3});
  const double bce = tape.bce_with_logits(z, {0, 1, 1}).item();
  out.push_back({"loss zero RTD logits give ln 2", std::abs(bce - std::log(2.0)) < 1e-15, detail::fmt("got %.17g", bce)});
  return out;
}

inline std::vector<VerifyCheck> verify_planner() {
  std::vector<VerifyCheck> out;
  for (const auto& ref : kZeroTableXXL256) {
    const auto p = plan_memory(preset_params("XXL"), 256, ref.stage);
    const double computed[4] = {p.params_bytes, p.grads_bytes, p.optimizer_bytes, p.total_bytes};
    const double expected[4] = {ref.params, ref.grads, ref.optimizer, ref.total};
    double worst = 0;
    for (int i = 0; i < 4; ++i) worst = std::max(worst, std::abs(computed[i] - expected[i]) / expected[i]);
    std::string detail = "computed " + format_bytes(p.params_bytes) + " / " + format_bytes(p.grads_bytes) + " / " +
                         format_bytes(p.optimizer_bytes) + " / " + format_bytes(p.total_bytes) + "; expected " +
                         format_bytes(ref.params) + " / " + format_bytes(ref.grads) + " / " +
                         format_bytes(ref.optimizer) + " / " + format_bytes(ref.total) +
                         detail::fmt("; worst rel diff %.3g", worst);
    out.push_back({"planner XXL 256 GPUs stage " + std::to_string(ref.stage), worst <= 0.10, detail});
  }
  return out;
}

inline std::vector<VerifyCheck> verify_pdr() {
  std::vector<VerifyCheck> out;
  ModelConfig cfg;
  cfg.hidden_size = 32;
  cfg.ffn_width = 64;
  cfg.depth_main = 1;
  cfg.depth_aux = 1;
  cfg.attention_heads = 2;
  cfg.max_seq_len = 16;
  auto m = fresh_main_encoder(cfg, 1);
  m.add_head(3, 1, "verify");
  const auto examples = marker_parity_examples(8, 1, cfg.max_seq_len);
  const auto cb = make_class_batch(examples, {0, 1, 2, 3, 4, 5, 6, 7});
  PdrConfig vanilla;
  vanilla.alpha = 0.0;
  PdrConfig zero_c;
  zero_c.radius = 0.0;
  Tape<float> t1, t2;
  const float a = pdr_loss(t1, m, 0, cb, vanilla, 3, 1).total.item();
  const float b = pdr_loss(t2, m, 0, cb, zero_c, 3, 1).total.item();
  out.push_back({"pdr radius 0 reproduces the vanilla loss", a == b, detail::fmt("vanilla %.9g, radius 0 %.9g", a, b)});
  bool nonneg = true;
  double min_r = INFINITY;
  for (std::uint64_t i = 0; i < 100; ++i) {
    PdrConfig p;
    p.radius = 0.1;
    Tape<float> t;
    const double r = pdr_loss(t, m, 0, cb, p, 3, i + 1).regularizer.item();
    nonneg = nonneg && r >= 0.0;
    min_r = std::min(min_r, r);
  }
  out.push_back({"pdr divergence is non-negative", nonneg, detail::fmt("min over 100 batches %.3g", min_r)});
  return out;
}

inline std::vector<VerifyCheck> verify_fused(std::size_t n = 10000) {
  std::vector<VerifyCheck> out;
  for (auto op : {StableOp::softmax, StableOp::softmax_dropout, StableOp::layernorm}) {
    StableOpParams p;
    p.op = op;
    p.cols = 16;
    p.seed = 11;
    const auto x = detail::edge_case_halves((n + p.cols - 1) / p.cols * p.cols, 5);
    AllocCounter cu, cf;
    const auto yu = unfused_stable_op(x, p, cu);
    const auto yf = fused_stable_op(x, p, cf);
    std::size_t differ = 0;
    for (std::size_t i = 0; i < x.size(); ++i) differ += yu[i].bits != yf[i].bits;
    const bool ok = differ == 0 && cf.n_buffers == 0 && cu.n_buffers >= 2;
    out.push_back({"fused " + to_string(op) + " bit-identical to unfused", ok,
                   std::to_string(x.size()) + " inputs, " + std::to_string(differ) + " differ; f32 buffers fused " +
                       std::to_string(cf.n_buffers) + ", unfused " + std::to_string(cu.n_buffers)});
  }
  return out;
}

inline std::vector<VerifyCheck> run_verify() {
  std::vector<VerifyCheck> all;
  for (auto&& group : {verify_gradients(), verify_loss_identities(), verify_planner(), verify_pdr(), verify_fused()})
    all.insert(all.end(), group.begin(), group.end());
  return all;
}

}  // namespace metro
