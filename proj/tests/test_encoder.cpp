#include <gtest/gtest.h>

#include <cmath>

#include "metro/encoder.hpp"
#include "metro/gradcheck_suite.hpp"

using namespace metro;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.hidden_size = 8;
  c.ffn_width = 12;
  c.depth_main = 2;
  c.depth_aux = 1;
  c.attention_heads = 2;
  c.vocab_size = 11;
  c.max_seq_len = 8;
  c.relpos_bins = 8;
  c.relpos_max_distance = 16;
  c.init_std = 0.5;  // large enough that every path carries signal
  return c;
}

EncoderInput make_input(std::size_t batch, std::size_t len, std::uint64_t seed, int vocab, std::size_t pads = 0) {
  EncoderInput in{batch, len, IdList(batch * len), std::vector<std::uint8_t>(batch * len, 0)};
  RngStream rng(seed, "input");
  for (auto& id : in.ids) id = static_cast<std::int32_t>(4 + rng.below(static_cast<std::uint64_t>(vocab - 4)));
  for (std::size_t b = 0; b < batch; ++b) {
    in.ids[b * len] = 1;
    for (std::size_t p = 0; p < pads; ++p) {
      in.ids[b * len + len - 1 - p] = 0;
      in.pad[b * len + len - 1 - p] = 1;
    }
  }
  return in;
}

template <typename T>
double sample_std(const Tensor<T>& t) {
  double mean = 0, sq = 0;
  for (T v : t.data()) mean += v;
  mean /= t.numel();
  for (T v : t.data()) sq += (v - mean) * (v - mean);
  return std::sqrt(sq / (t.numel() - 1));
}

// Reference bucketing written from the definition: the log-spaced bucket is
// the largest b whose lower edge exact * (max_distance/exact)^(b/span) <= n.
int reference_bucket(int delta, int bins, int max_distance) {
  const int half = bins / 2, exact = half / 2, span = half - exact;
  const int upper = delta > 0 ? half : 0;
  const long n = std::labs(delta);
  if (n < exact) return upper + static_cast<int>(n);
  int b = 0;
  while (b + 1 < span &&
         exact * std::pow(static_cast<long double>(max_distance) / exact, static_cast<long double>(b + 1) / span) <=
             n + 1e-9L)
    ++b;
  return upper + exact + b;
}

}  // namespace

TEST(ScaledInit, TargetStdArithmetic) {
  EXPECT_DOUBLE_EQ(scaled_init_std(0.02, 7, true), 0.005);
  EXPECT_DOUBLE_EQ(scaled_init_std(0.02, 7, false), 0.02);
  EXPECT_DOUBLE_EQ(scaled_init_std(0.02, 0, true), 0.02 / std::sqrt(2.0));
}

TEST(ScaledInit, EmpiricalStdOfLargeLayers) {
  ModelConfig c;
  c.hidden_size = 512;
  c.ffn_width = 512;
  c.attention_heads = 8;
  c.depth_main = 4;
  c.depth_aux = 1;
  c.vocab_size = 16;
  c.max_seq_len = 4;
  for (bool scaled : {true, false}) {
    c.scaled_init = scaled;
    auto w = init_encoder<float>(c, c.depth_main, true, 3, "main");
    for (int l = 0; l < c.depth_main; ++l) {
      const double target = scaled_init_std(0.02, l, scaled);
      EXPECT_NEAR(sample_std(w.layers[l].wo), target, 0.05 * target) << "layer " << l;
      EXPECT_NEAR(sample_std(w.layers[l].w2), target, 0.05 * target) << "layer " << l;
      EXPECT_NEAR(sample_std(w.layers[l].wq), 0.02, 0.05 * 0.02);
    }
    if (scaled) {
      const double ratio = sample_std(w.layers[0].wo) / sample_std(w.layers[3].wo);
      EXPECT_NEAR(ratio, std::sqrt(8.0 / 2.0), 0.05 * 2.0);
      EXPECT_NEAR(sample_std(w.layers[3].wo), 0.02 / std::sqrt(8.0), 0.05 * 0.02 / std::sqrt(8.0));
    }
    for (float g : w.layers[1].ln2_gamma.data()) EXPECT_EQ(g, 1.0f);
    for (float b : w.layers[1].b1.data()) EXPECT_EQ(b, 0.0f);
  }
}

TEST(RelPos, ZeroOffsetAndClamping) {
  EXPECT_EQ(relpos_bucket(5, 5, 32, 128), 0);
  EXPECT_EQ(relpos_bucket(0, 128, 32, 128), relpos_bucket(0, 1280, 32, 128));
  EXPECT_EQ(relpos_bucket(1280, 0, 32, 128), relpos_bucket(128, 0, 32, 128));
  EXPECT_EQ(relpos_bucket(0, 1, 32, 128), 17);  // positive offsets use the upper half
  EXPECT_EQ(relpos_bucket(1, 0, 32, 128), 1);
}

TEST(RelPos, FullTableMatchesReference) {
  for (auto [bins, maxd] : std::vector<std::pair<int, int>>{{32, 128}, {64, 128}, {128, 256}, {8, 16}}) {
    for (int delta = -200; delta <= 200; ++delta) {
      const int q = 300, k = q + delta;
      ASSERT_EQ(relpos_bucket(q, k, bins, maxd), reference_bucket(delta, bins, maxd))
          << "bins " << bins << " max " << maxd << " delta " << delta;
    }
  }
}

TEST(AttentionBias, TranslationInvariantWithoutReset) {
  auto cfg = tiny_config();
  cfg.tupe_reset_cls = false;
  auto w = init_encoder<double>(cfg, 1, false, 1, "m");
  Tape<double> tape;
  auto bias = attention_bias(tape, cfg, w, 8);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i + 1 < 8; ++i)
      for (std::size_t j = 0; j + 1 < 8; ++j)
        EXPECT_EQ(bias.data()[(h * 8 + i) * 8 + j], bias.data()[(h * 8 + i + 1) * 8 + j + 1]);
  EXPECT_THROW(attention_bias(tape, cfg, w, 9), DimensionError);
}

TEST(AttentionBias, ResetMakesClsRowAndColumnConstant) {
  auto cfg = tiny_config();
  auto w = init_encoder<double>(cfg, 1, false, 1, "m");
  Tape<double> tape;
  auto before = attention_bias(tape, cfg, w, 6);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(before.data()[(h * 6) * 6 + j], w.cls_as_query.data()[h]);
    for (std::size_t i = 1; i < 6; ++i) EXPECT_EQ(before.data()[(h * 6 + i) * 6], w.cls_as_key.data()[h]);
  }
  // Rewriting the bucket table leaves row/column 0 untouched.
  for (auto& v : w.relpos_table.data()) v += 3.0;
  auto after = attention_bias(tape, cfg, w, 6);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        const std::size_t idx = (h * 6 + i) * 6 + j;
        if (i == 0 || j == 0) EXPECT_EQ(before.data()[idx], after.data()[idx]);
        else EXPECT_NE(before.data()[idx], after.data()[idx]);
      }
}

TEST(AttentionBias, ResetScalarGradientsMatchFiniteDifferences) {
  auto cfg = tiny_config();
  auto w = init_encoder<double>(cfg, 1, false, 1, "m");
  RngStream rng(4, "proj");
  auto proj = detail::random_tensor(rng, {2, 6, 6}, false);
  ScalarFn fn = [&](Tape<double>& t, std::vector<Tensor<double>>&) {
    return project(t, attention_bias(t, cfg, w, 6), proj);
  };
  const auto r = check_gradients(fn, {w.cls_as_query, w.cls_as_key, w.relpos_table});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Encoder, OutputShapes) {
  auto cfg = tiny_config();
  auto m = PretrainModel<float>::init(cfg, 9);
  auto in = make_input(3, 7, 1, cfg.vocab_size);
  Tape<float> tape;
  auto r = forward(tape, cfg, m.main, in, {});
  EXPECT_EQ(r.hidden.shape(), (Shape{21, 8}));
  EXPECT_EQ(r.mlm_logits.shape(), (Shape{21, 11}));
  EXPECT_EQ(r.rtd_logits.shape(), (Shape{21}));
  auto in_long = make_input(1, 9, 1, cfg.vocab_size);
  EXPECT_THROW(forward(tape, cfg, m.main, in_long, {}), DimensionError);
}

TEST(Encoder, ZeroDropoutForwardIsDeterministic) {
  auto cfg = tiny_config();
  auto m = PretrainModel<float>::init(cfg, 9);
  auto in = make_input(2, 8, 5, cfg.vocab_size, 2);
  ForwardOptions<float> opt{true, static_cast<float>(cfg.dropout_aux), {1, 2, 3}};
  Tape<float> t1, t2;
  auto a = encode(t1, cfg, m.aux, in, opt);
  opt.dropout_ctx.step = 99;  // irrelevant without dropout
  auto b = encode(t2, cfg, m.aux, in, opt);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Encoder, DropoutChangesTrainingOutputs) {
  auto cfg = tiny_config();
  auto m = PretrainModel<float>::init(cfg, 9);
  auto in = make_input(2, 8, 5, cfg.vocab_size);
  Tape<float> tape;
  auto eval = encode(tape, cfg, m.main, in, {});
  auto train = encode(tape, cfg, m.main, in, {true, 0.1f, {1, 1, 1}});
  EXPECT_FALSE(std::equal(eval.data().begin(), eval.data().end(), train.data().begin()));
}

TEST(Encoder, PaddingDoesNotChangeRealPositions) {
  auto cfg = tiny_config();
  auto m = PretrainModel<double>::init(cfg, 2);
  auto base = make_input(2, 5, 8, cfg.vocab_size);
  EncoderInput padded{2, 8, IdList(16, 0), std::vector<std::uint8_t>(16, 1)};
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 5; ++i) {
      padded.ids[b * 8 + i] = base.ids[b * 5 + i];
      padded.pad[b * 8 + i] = 0;
    }
  for (auto placement : {LayerNormPlacement::post, LayerNormPlacement::pre}) {
    cfg.layernorm_placement = placement;
    Tape<double> tape;
    auto h1 = encode(tape, cfg, m.main, base, {});
    auto h2 = encode(tape, cfg, m.main, padded, {});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 8; ++j)
          EXPECT_NEAR(h1.data()[(b * 5 + i) * 8 + j], h2.data()[(b * 8 + i) * 8 + j], 1e-6);
  }
}

TEST(Encoder, PostAndPreLayerNormDifferAndBothPassGradientChecks) {
  auto cfg = tiny_config();
  cfg.init_std = 0.3;
  auto in = make_input(2, 5, 3, cfg.vocab_size, 1);
  std::vector<double> outputs[2];
  int idx = 0;
  for (auto placement : {LayerNormPlacement::post, LayerNormPlacement::pre}) {
    cfg.layernorm_placement = placement;
    auto m = PretrainModel<double>::init(cfg, 4);
    // Non-trivial LayerNorm affine parameters so their gradients are exercised.
    RngStream rng(5, "ln");
    for (auto& p : m.parameters())
      if (p.name.find("ln") != std::string::npos)
        for (auto& v : p.tensor.data()) v += 0.3 * rng.normal();
    RngStream prng(6, "proj");
    auto proj = detail::random_tensor(prng, {10, 8}, false);
    IdList targets(10);
    for (std::size_t i = 0; i < 10; ++i) targets[i] = static_cast<std::int32_t>(i % 11);
    std::vector<std::uint8_t> labels{1, 0, 1, 1, 0, 0, 1, 0, 1, 1};
    ScalarFn fn = [&](Tape<double>& t, std::vector<Tensor<double>>&) {
      auto r = forward(t, cfg, m.main, in, {});
      auto l1 = project(t, r.hidden, proj);
      auto l2 = t.cross_entropy(r.mlm_logits, targets, RowList{1, 2, 6});
      auto l3 = t.bce_with_logits(r.rtd_logits, labels);
      return t.add(t.add(l1, l2), l3);
    };
    std::vector<Tensor<double>> params;
    for (auto& p : m.parameters())
      if (p.name.rfind("main", 0) == 0 || p.name.rfind("shared", 0) == 0) params.push_back(p.tensor);
    const auto r = check_gradients(fn, params);
    EXPECT_LT(r.max_rel_error, 1e-6) << to_string(placement);
    Tape<double> t;
    auto h = encode(t, cfg, m.main, in, {});
    outputs[idx++].assign(h.data().begin(), h.data().end());
  }
  EXPECT_NE(outputs[0], outputs[1]);
}

TEST(Sharing, SharedWordEmbeddingsAreVisibleToBothModels) {
  auto cfg = tiny_config();
  auto m = PretrainModel<float>::init(cfg, 1);
  ASSERT_TRUE(m.aux.word_embeddings.same_storage(m.main.word_embeddings));
  EXPECT_FALSE(m.aux.position_embeddings.same_storage(m.main.position_embeddings));
  EXPECT_FALSE(m.aux.lm_bias.same_storage(m.main.lm_bias));
  auto in = make_input(1, 6, 2, cfg.vocab_size);
  Tape<float> tape;
  auto aux0 = encode(tape, cfg, m.aux, in, {});
  auto main0 = encode(tape, cfg, m.main, in, {});
  m.main.word_embeddings.data()[static_cast<std::size_t>(in.ids[3]) * 8] += 1.0f;
  auto aux1 = encode(tape, cfg, m.aux, in, {});
  auto main1 = encode(tape, cfg, m.main, in, {});
  EXPECT_FALSE(std::equal(aux0.data().begin(), aux0.data().end(), aux1.data().begin()));
  EXPECT_FALSE(std::equal(main0.data().begin(), main0.data().end(), main1.data().begin()));

  // Individual position embeddings: editing the main table leaves aux alone.
  m.main.position_embeddings.data()[10] += 1.0f;
  auto aux2 = encode(tape, cfg, m.aux, in, {});
  auto main2 = encode(tape, cfg, m.main, in, {});
  EXPECT_TRUE(std::equal(aux1.data().begin(), aux1.data().end(), aux2.data().begin()));
  EXPECT_FALSE(std::equal(main1.data().begin(), main1.data().end(), main2.data().begin()));
}

TEST(Sharing, ParameterListHasSharedTensorsOnce) {
  auto cfg = tiny_config();
  cfg.share_lm_bias = true;
  auto m = PretrainModel<float>::init(cfg, 1);
  int shared = 0;
  for (const auto& p : m.parameters()) shared += p.name.rfind("shared.", 0) == 0;
  EXPECT_EQ(shared, 2);  // word embeddings and LM bias
  const auto counts = count_parameters(m);
  EXPECT_EQ(counts.shared, 11u * 8u + 11u);
  EXPECT_GT(counts.main, counts.aux);
}
