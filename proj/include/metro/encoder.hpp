#pragma once

// Transformer encoder with the architecture switches used for denoising
// pretraining: post/pre LayerNorm, shared relative-position bias with [CLS]
// reset scalars, absolute position embeddings, depth-scaled initialization,
// and a tied LM head whose bias can be shared or kept per model.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "metro/config.hpp"
#include "metro/relpos.hpp"
#include "metro/rng.hpp"
#include "metro/tape.hpp"

namespace metro {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct LayerWeights {
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> w1, b1, w2, b2;
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
};

template <typename T>
struct EncoderWeights {
  Tensor<T> word_embeddings;      // [V x d], possibly shared with the other encoder
  Tensor<T> position_embeddings;  // [max_seq_len x d]
  // Embedding LayerNorm for post-LN; final LayerNorm for pre-LN.
  Tensor<T> ln_gamma, ln_beta;
  std::vector<LayerWeights<T>> layers;
  Tensor<T> relpos_table;  // [heads x bins], shared by all layers
  Tensor<T> cls_as_query;  // [heads]
  Tensor<T> cls_as_key;    // [heads]
  Tensor<T> lm_bias;       // [V], possibly shared
  Tensor<T> rtd_weight;    // [d x 1]; undefined for the auxiliary encoder
  Tensor<T> rtd_bias;      // [1]

  bool has_rtd_head() const { return rtd_weight.defined(); }

  // Every tensor owned or referenced by this encoder, named under `prefix`.
  std::vector<NamedTensor<T>> named_tensors(const std::string& prefix) const {
    std::vector<NamedTensor<T>> out{{prefix + ".word_embeddings", word_embeddings},
                                    {prefix + ".position_embeddings", position_embeddings},
                                    {prefix + ".ln.gamma", ln_gamma},
                                    {prefix + ".ln.beta", ln_beta}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& w = layers[l];
      const std::string p = prefix + ".layer" + std::to_string(l) + ".";
      out.insert(out.end(), {{p + "wq", w.wq},
                             {p + "wk", w.wk},
                             {p + "wv", w.wv},
                             {p + "wo", w.wo},
                             {p + "w1", w.w1},
                             {p + "b1", w.b1},
                             {p + "w2", w.w2},
                             {p + "b2", w.b2},
                             {p + "ln1.gamma", w.ln1_gamma},
                             {p + "ln1.beta", w.ln1_beta},
                             {p + "ln2.gamma", w.ln2_gamma},
                             {p + "ln2.beta", w.ln2_beta}});
    }
    out.insert(out.end(), {{prefix + ".relpos_table", relpos_table},
                           {prefix + ".cls_as_query", cls_as_query},
                           {prefix + ".cls_as_key", cls_as_key},
                           {prefix + ".lm_bias", lm_bias}});
    if (has_rtd_head()) {
      out.push_back({prefix + ".rtd_weight", rtd_weight});
      out.push_back({prefix + ".rtd_bias", rtd_bias});
    }
    return out;
  }
};

// Standard deviation used for the residual-branch output projections (Wo, W2)
// of 0-based layer `layer`.
inline double scaled_init_std(double init_std, int layer, bool scaled) {
  return scaled ? init_std / std::sqrt(2.0 * (layer + 1)) : init_std;
}

namespace detail {

template <typename T>
Tensor<T> normal_tensor(Shape shape, double stddev, std::uint64_t seed, const std::string& name) {
  Tensor<T> t(std::move(shape), true);
  RngStream rng(seed, stream_id("init"), stream_id(name));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
Tensor<T> filled(Shape shape, T value) {
  Tensor<T> t(std::move(shape), true);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

}  // namespace detail

// Initializes one encoder of `depth` layers. Tensor values depend only on
// (seed, prefix + tensor name), so the same name always draws the same values.
template <typename T>
EncoderWeights<T> init_encoder(const ModelConfig& cfg, int depth, bool with_rtd_head, std::uint64_t seed,
                               const std::string& prefix) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.hidden_size);
  const auto ffn = static_cast<std::size_t>(cfg.ffn_width);
  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  const auto heads = static_cast<std::size_t>(cfg.attention_heads);
  const double sd = cfg.init_std;
  auto normal = [&](Shape s, double stddev, const std::string& name) {
    return detail::normal_tensor<T>(std::move(s), stddev, seed, prefix + "." + name);
  };

  EncoderWeights<T> w;
  w.word_embeddings = normal({vocab, d}, sd, "word_embeddings");
  w.position_embeddings = normal({static_cast<std::size_t>(cfg.max_seq_len), d}, sd, "position_embeddings");
  w.ln_gamma = detail::filled<T>({d}, T{1});
  w.ln_beta = detail::filled<T>({d}, T{0});
  for (int l = 0; l < depth; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const double out_sd = scaled_init_std(sd, l, cfg.scaled_init);
    LayerWeights<T> lw;
    lw.wq = normal({d, d}, sd, p + "wq");
    lw.wk = normal({d, d}, sd, p + "wk");
    lw.wv = normal({d, d}, sd, p + "wv");
    lw.wo = normal({d, d}, out_sd, p + "wo");
    lw.w1 = normal({d, ffn}, sd, p + "w1");
    lw.b1 = detail::filled<T>({ffn}, T{0});
    lw.w2 = normal({ffn, d}, out_sd, p + "w2");
    lw.b2 = detail::filled<T>({d}, T{0});
    lw.ln1_gamma = detail::filled<T>({d}, T{1});
    lw.ln1_beta = detail::filled<T>({d}, T{0});
    lw.ln2_gamma = detail::filled<T>({d}, T{1});
    lw.ln2_beta = detail::filled<T>({d}, T{0});
    w.layers.push_back(std::move(lw));
  }
  w.relpos_table = normal({heads, static_cast<std::size_t>(cfg.relpos_bins)}, sd, "relpos_table");
  w.cls_as_query = normal({heads}, sd, "cls_as_query");
  w.cls_as_key = normal({heads}, sd, "cls_as_key");
  w.lm_bias = detail::filled<T>({vocab}, T{0});
  if (with_rtd_head) {
    w.rtd_weight = normal({d, 1}, sd, "rtd_weight");
    w.rtd_bias = detail::filled<T>({1}, T{0});
  }
  return w;
}

// Per-forward dropout keying: every dropout site draws a fresh op id, so two
// forwards started from equal contexts see identical masks.
struct DropoutContext {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t salt = 0;
  std::uint64_t next_op = 0;

  DropoutKey next() { return {seed, step, mix64(salt) ^ next_op++}; }
};

struct EncoderInput {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  IdList ids;                     // [batch x seq_len]
  std::vector<std::uint8_t> pad;  // 1 marks a padding position
};

template <typename T>
struct ForwardOptions {
  bool train = false;
  T dropout = T{0};
  DropoutContext dropout_ctx{};
  // Added to the (word + position) embedding sum before the first layer.
  const Tensor<T>* embedding_perturbation = nullptr;
};

// [heads x L x L] additive attention bias: relative buckets, with row 0 and
// column 0 replaced by the per-head [CLS] scalars when the reset is enabled
// (the corner takes the query value).
template <typename T>
Tensor<T> attention_bias(Tape<T>& tape, const ModelConfig& cfg, const EncoderWeights<T>& w, std::size_t seq_len) {
  if (seq_len > static_cast<std::size_t>(cfg.max_seq_len))
    throw DimensionError("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
  const auto grid = relpos_bucket_grid(seq_len, cfg.relpos_bins, cfg.relpos_max_distance);
  return tape.relative_bias(w.relpos_table, grid, seq_len, w.cls_as_query, w.cls_as_key, cfg.tupe_reset_cls);
}

// Returns hidden states [batch*seq_len x d].
template <typename T>
Tensor<T> encode(Tape<T>& tape, const ModelConfig& cfg, const EncoderWeights<T>& w, const EncoderInput& in,
                 ForwardOptions<T> opt) {
  const std::size_t B = in.batch, L = in.seq_len;
  const auto d = static_cast<std::size_t>(cfg.hidden_size);
  const auto H = static_cast<std::size_t>(cfg.attention_heads);
  const std::size_t dh = d / H;
  if (L > static_cast<std::size_t>(cfg.max_seq_len))
    throw DimensionError("sequence length " + std::to_string(L) + " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  if (in.ids.size() != B * L || in.pad.size() != B * L)
    throw DimensionError("encoder input: ids/pad size does not match batch x seq_len");
  const T eps = static_cast<T>(cfg.layer_norm_eps);
  const bool post = cfg.layernorm_placement == LayerNormPlacement::post;
  const bool drop = opt.train && opt.dropout > T{0};
  auto dropout = [&](const Tensor<T>& x) { return drop ? tape.dropout(x, opt.dropout, opt.dropout_ctx.next()) : x; };

  IdList positions(B * L);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i) positions[b * L + i] = static_cast<std::int32_t>(i);
  Tensor<T> x = tape.add(tape.embedding(w.word_embeddings, in.ids), tape.embedding(w.position_embeddings, positions));
  if (opt.embedding_perturbation) x = tape.add(x, *opt.embedding_perturbation);
  if (post) x = tape.layer_norm(x, w.ln_gamma, w.ln_beta, eps);
  x = dropout(x);

  const Tensor<T> bias = attention_bias(tape, cfg, w, L);
  const T inv_sqrt_dh = T{1} / std::sqrt(static_cast<T>(dh));

  auto split_heads = [&](const Tensor<T>& t) {
    return tape.permute(t, {0, 2, 1, 3}, {B, L, H, dh}, {B * H, L, dh});
  };

  for (const auto& lw : w.layers) {
    // Self-attention sublayer.
    const Tensor<T> a_in = post ? x : tape.layer_norm(x, lw.ln1_gamma, lw.ln1_beta, eps);
    auto q = split_heads(tape.linear(a_in, lw.wq));
    auto k = split_heads(tape.linear(a_in, lw.wk));
    auto v = split_heads(tape.linear(a_in, lw.wv));
    auto scores = tape.reshape(tape.scale(tape.bmm(q, k, true), inv_sqrt_dh), {B, H, L, L});
    auto probs = tape.softmax(tape.attention_mask_add(scores, bias, in.pad), 3);
    probs = dropout(probs);
    auto ctx = tape.bmm(tape.reshape(probs, {B * H, L, L}), v);
    ctx = tape.permute(ctx, {0, 2, 1, 3}, {B, H, L, dh}, {B * L, d});
    auto attn_out = dropout(tape.linear(ctx, lw.wo));
    x = tape.add(x, attn_out);
    if (post) x = tape.layer_norm(x, lw.ln1_gamma, lw.ln1_beta, eps);

    // Feed-forward sublayer.
    const Tensor<T> f_in = post ? x : tape.layer_norm(x, lw.ln2_gamma, lw.ln2_beta, eps);
    auto hdn = tape.gelu(tape.linear(f_in, lw.w1, &lw.b1));
    auto f_out = dropout(tape.linear(hdn, lw.w2, &lw.b2));
    x = tape.add(x, f_out);
    if (post) x = tape.layer_norm(x, lw.ln2_gamma, lw.ln2_beta, eps);
  }
  if (!post) x = tape.layer_norm(x, w.ln_gamma, w.ln_beta, eps);
  return x;
}

// Tied LM head: logits = h E^T + bias, optionally on a subset of rows.
template <typename T>
Tensor<T> mlm_logits(Tape<T>& tape, const EncoderWeights<T>& w, const Tensor<T>& hidden,
                     const std::optional<RowList>& rows = std::nullopt) {
  const Tensor<T> h = rows ? tape.gather_rows(hidden, *rows) : hidden;
  return tape.add_bias(tape.matmul(h, w.word_embeddings, /*transpose_b=*/true), w.lm_bias);
}

// One logit per position: the log-odds that the token is original.
template <typename T>
Tensor<T> rtd_logits(Tape<T>& tape, const EncoderWeights<T>& w, const Tensor<T>& hidden) {
  if (!w.has_rtd_head()) throw ConfigError("this encoder has no RTD head");
  auto z = tape.linear(hidden, w.rtd_weight, &w.rtd_bias);
  return tape.reshape(z, {hidden.dim(0)});
}

template <typename T>
struct ForwardResult {
  Tensor<T> hidden;       // [B*L x d]
  Tensor<T> mlm_logits;   // [B*L x V]
  Tensor<T> rtd_logits;   // [B*L]; undefined without an RTD head
};

template <typename T>
ForwardResult<T> forward(Tape<T>& tape, const ModelConfig& cfg, const EncoderWeights<T>& w, const EncoderInput& in,
                         ForwardOptions<T> opt) {
  ForwardResult<T> r;
  r.hidden = encode(tape, cfg, w, in, opt);
  r.mlm_logits = mlm_logits(tape, w, r.hidden);
  if (w.has_rtd_head()) r.rtd_logits = rtd_logits(tape, w, r.hidden);
  return r;
}

// Auxiliary + main encoder pair with the configured embedding sharing.
template <typename T>
struct PretrainModel {
  ModelConfig config;
  EncoderWeights<T> aux;
  EncoderWeights<T> main;

  static PretrainModel init(const ModelConfig& cfg, std::uint64_t seed) {
    PretrainModel m;
    m.config = cfg;
    m.aux = init_encoder<T>(cfg, cfg.depth_aux, false, seed, "aux");
    m.main = init_encoder<T>(cfg, cfg.depth_main, true, seed, "main");
    if (cfg.share_word_embeddings) {
      m.aux.word_embeddings = detail::normal_tensor<T>(m.aux.word_embeddings.shape(), cfg.init_std, seed,
                                                       "shared.word_embeddings");
      m.main.word_embeddings = m.aux.word_embeddings;
    }
    if (cfg.share_position_embeddings) {
      m.aux.position_embeddings = detail::normal_tensor<T>(m.aux.position_embeddings.shape(), cfg.init_std, seed,
                                                           "shared.position_embeddings");
      m.main.position_embeddings = m.aux.position_embeddings;
    }
    if (cfg.share_lm_bias) m.main.lm_bias = m.aux.lm_bias;
    return m;
  }

  // Unique parameters (shared tensors appear once, under a "shared." name).
  std::vector<NamedTensor<T>> parameters() const {
    std::vector<NamedTensor<T>> out;
    auto add_unique = [&](const std::vector<NamedTensor<T>>& src) {
      for (const auto& nt : src) {
        bool dup = false;
        for (auto& existing : out) {
          if (existing.tensor.same_storage(nt.tensor)) {
            dup = true;
            const auto dot = existing.name.find('.');
            existing.name = "shared" + existing.name.substr(dot);
            break;
          }
        }
        if (!dup) out.push_back(nt);
      }
    };
    add_unique(aux.named_tensors("aux"));
    add_unique(main.named_tensors("main"));
    return out;
  }
};

struct ParameterCounts {
  std::size_t aux = 0;
  std::size_t main = 0;
  std::size_t shared = 0;
  std::size_t total() const { return aux + main + shared; }
};

template <typename T>
ParameterCounts count_parameters(const PretrainModel<T>& m) {
  ParameterCounts c;
  for (const auto& p : m.parameters()) {
    if (p.name.rfind("shared.", 0) == 0) c.shared += p.tensor.numel();
    else if (p.name.rfind("aux.", 0) == 0) c.aux += p.tensor.numel();
    else c.main += p.tensor.numel();
  }
  return c;
}

}  // namespace metro
