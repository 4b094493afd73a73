#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "metro/pipeline.hpp"

using namespace metro;
using TensorD = Tensor<double>;

namespace {

// [CLS] t... [SEP] [PAD]... per sequence.
struct Block {
  IdList ids;
  std::vector<std::uint8_t> pad;
  std::size_t batch, len;
};

Block make_block(std::size_t batch, std::size_t len, std::size_t tokens, int vocab, std::uint64_t seed) {
  Block b{IdList(batch * len, kPadId), std::vector<std::uint8_t>(batch * len, 1), batch, len};
  RngStream rng(seed, "block");
  for (std::size_t s = 0; s < batch; ++s) {
    const std::size_t base = s * len;
    b.ids[base] = kClsId;
    for (std::size_t i = 1; i <= tokens; ++i)
      b.ids[base + i] = static_cast<std::int32_t>(kNumSpecial + rng.below(static_cast<std::uint64_t>(vocab - kNumSpecial)));
    b.ids[base + tokens + 1] = kSepId;
    for (std::size_t i = 0; i < tokens + 2; ++i) b.pad[base + i] = 0;
  }
  return b;
}

TensorD random_logits(std::size_t n, std::size_t v, std::uint64_t seed, double scale = 3.0) {
  TensorD t({n, v}, true);
  RngStream rng(seed, "logits");
  for (auto& x : t.data()) x = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

// Independent log-softmax oracle in long double.
double ce_oracle(const TensorD& logits, const IdList& targets) {
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  long double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    long double s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<long double>(logits.data()[r * v + j]));
    total += std::log(s) - static_cast<long double>(logits.data()[r * v + static_cast<std::size_t>(targets[r])]);
  }
  return static_cast<double>(total / n);
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.hidden_size = 8;
  c.ffn_width = 16;
  c.depth_main = 2;
  c.depth_aux = 1;
  c.attention_heads = 2;
  c.vocab_size = 24;
  c.max_seq_len = 12;
  c.relpos_bins = 8;
  c.relpos_max_distance = 16;
  c.init_std = 0.3;
  return c;
}

}  // namespace

TEST(SelectMasks, CeilingCount) {
  auto b = make_block(1, 22, 20, 50, 1);
  RngStream rng(3, "mask");
  auto cb = select_masks(b.ids, b.pad, 1, 22, 0.15, rng);
  EXPECT_EQ(cb.masked.size(), 3u);
  EXPECT_EQ(mask_count(20, 0.15), 3u);
  EXPECT_EQ(mask_count(21, 0.15), 4u);
  EXPECT_EQ(mask_count(1, 0.15), 1u);
  for (auto p : cb.masked) EXPECT_EQ(cb.x_mask[p], kMaskId);
}

TEST(SelectMasks, SpecialsAndPaddingNeverMasked) {
  auto b = make_block(2, 16, 9, 30, 2);
  RngStream rng(5, "mask");
  for (int t = 0; t < 10000; ++t) {
    auto cb = select_masks(b.ids, b.pad, 2, 16, 0.15, rng);
    for (auto p : cb.masked) {
      ASSERT_FALSE(is_special(cb.x_orig[p]));
      ASSERT_FALSE(cb.pad[p]);
      ASSERT_NE(p % 16, 0u);
    }
  }
}

TEST(SelectMasks, NoMaskableTokensIsDataError) {
  IdList ids{kClsId, kSepId, kPadId};
  std::vector<std::uint8_t> pad{0, 0, 1};
  RngStream rng(1, "mask");
  EXPECT_THROW(select_masks(ids, pad, 1, 3, 0.15, rng), DataError);
  EXPECT_THROW(select_masks(ids, pad, 1, 3, 0.0, rng), ConfigError);
}

TEST(SelectMasks, PositionFrequencyUniformWithinThreeSigma) {
  auto b = make_block(1, 22, 20, 50, 4);
  RngStream rng(11, "mask");
  const int draws = 100000;
  std::vector<int> counts(22, 0);
  for (int t = 0; t < draws; ++t)
    for (auto p : select_masks(b.ids, b.pad, 1, 22, 0.15, rng).masked) ++counts[p];
  const double p = 3.0 / 20.0;
  const double mean = draws * p, sigma = std::sqrt(draws * p * (1 - p));
  EXPECT_EQ(counts[0], 0);
  EXPECT_EQ(counts[21], 0);
  for (int i = 1; i <= 20; ++i) EXPECT_LT(std::abs(counts[i] - mean), 3 * sigma) << "position " << i;
}

TEST(AuxMlmLoss, UniformAndPerfectLogits) {
  CorruptionBatch cb;
  cb.x_orig = {kClsId, 10, 200, kSepId};
  cb.masked = {1, 2};
  Tape<double> tape;
  TensorD uniform({2, 256}, std::vector<double>(512, 0.0));
  EXPECT_NEAR(aux_mlm_loss(tape, uniform, cb).item(), std::log(256.0), 1e-12);
  EXPECT_NEAR(std::log(256.0), 5.545, 1e-3);
  TensorD perfect({2, 256}, std::vector<double>(512, 0.0));
  perfect.data()[10] = 100;
  perfect.data()[256 + 200] = 100;
  EXPECT_LT(aux_mlm_loss(tape, perfect, cb).item(), 1e-40);
  cb.masked.clear();
  EXPECT_THROW(aux_mlm_loss(tape, uniform, cb), DataError);
  EXPECT_THROW(sclm_loss(tape, uniform, cb), DataError);
}

TEST(AuxMlmLoss, MatchesLogSoftmaxOracle) {
  auto b = make_block(3, 20, 17, 40, 7);
  RngStream rng(8, "mask");
  auto cb = select_masks(b.ids, b.pad, 3, 20, 0.3, rng);
  auto logits = random_logits(cb.masked.size(), 40, 9);
  Tape<double> tape;
  EXPECT_NEAR(aux_mlm_loss(tape, logits, cb).item(), ce_oracle(logits, cb.masked_targets()), 1e-10);
  EXPECT_NEAR(sclm_loss(tape, logits, cb).item(), ce_oracle(logits, cb.masked_targets()), 1e-10);
  TensorD uniform({cb.masked.size(), 40}, std::vector<double>(cb.masked.size() * 40, 0.0));
  EXPECT_NEAR(sclm_loss(tape, uniform, cb).item(), std::log(40.0), 1e-12);
}

TEST(SampleCorruption, ConfidentAuxiliaryReplacesNothing) {
  auto b = make_block(2, 16, 12, 30, 3);
  RngStream rng(2, "mask");
  auto cb = select_masks(b.ids, b.pad, 2, 16, 0.5, rng);
  TensorD logits({cb.masked.size(), 30}, std::vector<double>(cb.masked.size() * 30, 0.0));
  for (std::size_t r = 0; r < cb.masked.size(); ++r)
    logits.data()[r * 30 + static_cast<std::size_t>(cb.x_orig[cb.masked[r]])] = 1000.0;
  RngStream srng(2, "sample");
  sample_corruption(cb, logits, srng);
  EXPECT_EQ(cb.x_noise, cb.x_orig);
  for (auto f : cb.replaced) EXPECT_EQ(f, 0);
  TensorD z({32}, std::vector<double>(32, 0.0));
  EXPECT_EQ(curriculum_metrics(cb, z).replace_rate, 0.0);
  EXPECT_TRUE(std::isnan(curriculum_metrics(cb, z).replace_accuracy));
}

TEST(SampleCorruption, UniformAuxiliaryReplacesAlmostEverything) {
  const std::size_t V = 256;
  auto b = make_block(64, 64, 62, V, 5);
  std::size_t masked = 0, replaced = 0;
  for (std::uint64_t step = 0; step < 20; ++step) {
    RngStream rng(1, stream_id("mask"), step);
    auto cb = select_masks(b.ids, b.pad, 64, 64, 0.15, rng);
    TensorD logits({cb.masked.size(), V}, std::vector<double>(cb.masked.size() * V, 0.0));
    RngStream srng(1, stream_id("sample"), step);
    sample_corruption(cb, logits, srng);
    masked += cb.masked.size();
    for (auto p : cb.masked) replaced += cb.replaced[p];
  }
  const double p = 255.0 / 256.0;
  const double sigma = std::sqrt(masked * p * (1 - p));
  EXPECT_LT(std::abs(static_cast<double>(replaced) - masked * p), 3 * sigma);
}

TEST(SampleCorruption, FrequenciesMatchSoftmaxWithinThreeSigma) {
  CorruptionBatch cb;
  cb.batch = 1;
  cb.seq_len = 3;
  cb.x_orig = {kClsId, 5, kSepId};
  cb.pad = {0, 0, 0};
  cb.masked = {1};
  const std::vector<double> z{0.3, -1.2, 2.0, 0.0, 0.7, -0.4};
  TensorD logits({1, 6}, z);
  double total = 0;
  for (double v : z) total += std::exp(v);
  RngStream rng(21, "sample");
  const int draws = 100000;
  std::vector<int> counts(6, 0);
  for (int t = 0; t < draws; ++t) {
    cb.x_noise = cb.x_orig;
    cb.replaced.assign(3, 0);
    sample_corruption(cb, logits, rng);
    ++counts[static_cast<std::size_t>(cb.x_noise[1])];
    ASSERT_EQ(cb.x_noise[0], kClsId);
    ASSERT_EQ(cb.x_noise[2], kSepId);
    ASSERT_EQ(cb.replaced[1], cb.x_noise[1] != 5 ? 1 : 0);
  }
  for (std::size_t j = 0; j < 6; ++j) {
    const double p = std::exp(z[j]) / total;
    EXPECT_LT(std::abs(counts[j] - draws * p), 3 * std::sqrt(draws * p * (1 - p))) << "token " << j;
  }
}

TEST(RtdLoss, ZeroLogitsGiveLn2) {
  auto b = make_block(2, 10, 6, 20, 1);
  RngStream rng(1, "mask");
  auto cb = select_masks(b.ids, b.pad, 2, 10, 0.5, rng);
  cb.x_noise[cb.masked[0]] = cb.x_orig[cb.masked[0]] == 4 ? 5 : 4;
  cb.replaced[cb.masked[0]] = 1;
  Tape<double> tape;
  TensorD z({20}, std::vector<double>(20, 0.0));
  EXPECT_NEAR(rtd_loss(tape, z, cb).item(), std::log(2.0), 1e-15);
}

TEST(RtdLoss, SampledOriginalCountsAsOriginal) {
  CorruptionBatch cb;
  cb.batch = 1;
  cb.seq_len = 4;
  cb.x_orig = {kClsId, 7, 8, kSepId};
  cb.x_noise = cb.x_orig;
  cb.pad = {0, 0, 0, 0};
  cb.masked = {1, 2};
  cb.replaced = {0, 0, 0, 0};
  cb.x_noise[2] = 9;
  cb.replaced[2] = 1;
  const auto y = cb.rtd_labels();
  EXPECT_EQ(y, (std::vector<std::uint8_t>{1, 1, 0, 1}));
  // Large positive logit on the masked-but-unchanged position costs nothing.
  Tape<double> tape;
  TensorD z({4}, std::vector<double>{50, 50, -50, 50});
  EXPECT_LT(rtd_loss(tape, z, cb).item(), 1e-20);
}

TEST(RtdLoss, MatchesDirectFormulaAndSkipsPadding) {
  auto b = make_block(3, 12, 7, 20, 6);
  RngStream rng(6, "mask");
  auto cb = select_masks(b.ids, b.pad, 3, 12, 0.4, rng);
  auto logits = random_logits(cb.masked.size(), 20, 4, 1.0);
  RngStream srng(6, "sample");
  sample_corruption(cb, logits, srng);
  TensorD z({36}, true);
  RngStream zr(9, "z");
  for (auto& v : z.data()) v = 6 * zr.uniform() - 3;
  long double total = 0;
  int n = 0;
  for (std::size_t i = 0; i < 36; ++i) {
    if (cb.pad[i]) continue;
    const long double s = 1.0L / (1.0L + std::exp(-static_cast<long double>(z.data()[i])));
    total -= cb.x_noise[i] == cb.x_orig[i] ? std::log(s) : std::log(1.0L - s);
    ++n;
  }
  Tape<double> tape;
  EXPECT_NEAR(rtd_loss(tape, z, cb).item(), static_cast<double>(total / n), 1e-10);
}

TEST(TotalLoss, Arithmetic) {
  EXPECT_DOUBLE_EQ(total_loss(2.0, 0.1, 3.0, 50, MainObjective::rtd_plus_sclm), 10.0);
  EXPECT_DOUBLE_EQ(total_loss(2.0, 0.1, std::nullopt, 50, MainObjective::rtd_only), 7.0);
  EXPECT_DOUBLE_EQ(total_loss(2.0, 0.1, std::nullopt, 0, MainObjective::rtd_only), 2.0);
  EXPECT_DOUBLE_EQ(total_loss(2.0, 0.1, 3.0, 50, MainObjective::replace_mlm), 5.0);
  Tape<double> tape;
  TensorD a({}, std::vector<double>{2.0}), r({}, std::vector<double>{0.1}), s({}, std::vector<double>{3.0});
  EXPECT_NEAR(total_loss(tape, a, r, s, 50, MainObjective::rtd_plus_sclm).item(), 10.0, 1e-12);
}

TEST(TotalLoss, AffineInEachComponent) {
  RngStream rng(3, "affine");
  for (int t = 0; t < 50; ++t) {
    const double a = rng.uniform() * 5, r = rng.uniform(), s = rng.uniform() * 5, lam = rng.uniform() * 100;
    const double base = total_loss(a, r, s, lam, MainObjective::rtd_plus_sclm);
    EXPECT_NEAR(total_loss(a + 1, r, s, lam, MainObjective::rtd_plus_sclm) - base, 1.0, 1e-9);
    EXPECT_NEAR(total_loss(a, r + 1, s, lam, MainObjective::rtd_plus_sclm) - base, lam, 1e-9);
    EXPECT_NEAR(total_loss(a, r, s + 1, lam, MainObjective::rtd_plus_sclm) - base, 1.0, 1e-9);
  }
}

TEST(CurriculumMetrics, HandBuiltBatch) {
  // Positions: [CLS] a b c d e [SEP] [PAD]; b, c, e replaced.
  CorruptionBatch cb;
  cb.batch = 1;
  cb.seq_len = 8;
  cb.x_orig = {kClsId, 4, 5, 6, 7, 8, kSepId, kPadId};
  cb.x_noise = {kClsId, 4, 9, 9, 7, 9, kSepId, kPadId};
  cb.pad = {0, 0, 0, 0, 0, 0, 0, 1};
  cb.masked = {1, 2, 3, 5};
  cb.replaced = {0, 0, 1, 1, 0, 1, 0, 0};
  // Main flags position 2 and 5 (negative logits), misses 3.
  TensorD z({8}, std::vector<double>{3, 2, -1, 0.5, 1, -4, 2, -9});
  auto m = curriculum_metrics(cb, z);
  EXPECT_DOUBLE_EQ(m.replace_rate, 3.0 / 7.0);
  EXPECT_DOUBLE_EQ(m.replace_accuracy, 2.0 / 3.0);
}

TEST(Pipeline, InvariantsAndReproducibility) {
  const auto cfg = tiny_model();
  auto model = PretrainModel<double>::init(cfg, 17);
  ObjectiveConfig obj;
  auto b = make_block(3, 12, 9, cfg.vocab_size, 12);
  for (std::uint64_t step = 0; step < 5; ++step) {
    Tape<double> t1, t2;
    auto r1 = pretrain_forward(t1, model, obj, b.ids, b.pad, 3, 12, 99, step);
    auto r2 = pretrain_forward(t2, model, obj, b.ids, b.pad, 3, 12, 99, step);
    EXPECT_EQ(r1.total.item(), r2.total.item());
    EXPECT_EQ(r1.corruption.x_noise, r2.corruption.x_noise);
    const auto& cb = r1.corruption;
    std::vector<bool> in_m(cb.positions(), false);
    for (auto p : cb.masked) in_m[p] = true;
    for (std::size_t i = 0; i < cb.positions(); ++i) {
      if (in_m[i]) continue;
      EXPECT_EQ(cb.x_noise[i], cb.x_orig[i]);
      EXPECT_EQ(cb.replaced[i], 0);
    }
    EXPECT_LE(r1.metrics.replace_rate, obj.mask_rate + 1.0 / 12.0);
    EXPECT_TRUE(std::isfinite(r1.total.item()));
  }
}

TEST(Pipeline, MainLossesSendNoGradientIntoAuxiliaryThroughSampling) {
  const auto cfg = tiny_model();
  auto model = PretrainModel<double>::init(cfg, 3);
  ObjectiveConfig obj;
  auto b = make_block(2, 12, 9, cfg.vocab_size, 1);
  Tape<double> tape;
  auto r = pretrain_forward(tape, model, obj, b.ids, b.pad, 2, 12, 5, 0);
  auto main_only = tape.add(tape.scale(r.rtd, 50.0), r.sclm);
  tape.backward(main_only);
  for (const auto& p : model.parameters()) {
    if (p.name.rfind("aux.", 0) != 0) continue;
    double norm = 0;
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) norm += g * g;
    EXPECT_EQ(norm, 0.0) << p.name;
  }
  double shared = 0;
  for (double g : model.main.word_embeddings.grad()) shared += g * g;
  EXPECT_GT(shared, 0.0);
}

TEST(Pipeline, SharedEmbeddingGradientIsSumOfComponents) {
  const auto cfg = tiny_model();
  ObjectiveConfig obj;
  auto b = make_block(2, 12, 10, cfg.vocab_size, 2);
  auto grad_of = [&](int which) {
    auto model = PretrainModel<double>::init(cfg, 8);
    Tape<double> tape;
    auto r = pretrain_forward(tape, model, obj, b.ids, b.pad, 2, 12, 4, 1);
    TensorD root = which == 0 ? r.total : which == 1 ? r.aux : which == 2 ? tape.scale(r.rtd, obj.lambda) : r.sclm;
    tape.backward(root);
    const auto g = model.aux.word_embeddings.grad();
    return std::vector<double>(g.begin(), g.end());
  };
  const auto total = grad_of(0), aux = grad_of(1), rtd = grad_of(2), sclm = grad_of(3);
  double max_abs = 0, max_diff = 0;
  for (std::size_t i = 0; i < total.size(); ++i) {
    max_abs = std::max(max_abs, std::abs(total[i]));
    max_diff = std::max(max_diff, std::abs(total[i] - (aux[i] + rtd[i] + sclm[i])));
  }
  EXPECT_GT(max_abs, 0.0);
  EXPECT_LT(max_diff, 1e-12 * std::max(1.0, max_abs));
}

TEST(Pipeline, UntrainedAuxiliaryStartsNearMaskRate) {
  ModelConfig cfg;
  cfg.vocab_size = 260;
  auto model = PretrainModel<float>::init(cfg, 1);
  ObjectiveConfig obj;
  auto b = make_block(16, 64, 62, 260, 3);
  Tape<float> tape;
  auto r = pretrain_forward(tape, model, obj, b.ids, b.pad, 16, 64, 1, 0);
  EXPECT_GE(r.metrics.replace_rate, 0.13);
  EXPECT_LE(r.metrics.replace_rate, 0.16);
  EXPECT_NEAR(r.aux.item(), std::log(260.0), 0.05 * std::log(260.0));
}
