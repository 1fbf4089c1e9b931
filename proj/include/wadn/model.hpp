#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "wadn/attention.hpp"
#include "wadn/error.hpp"
#include "wadn/ops.hpp"
#include "wadn/rng.hpp"
#include "wadn/tensor.hpp"
#include "wadn/vocab.hpp"

namespace wadn {

struct AspectRatio {
  std::size_t layers = 1;
  std::size_t heads = 8;  // heads per layer
};

/// Curated grids for 48 and 16 total heads; other totals get every divisor
/// pair, deepest first.
inline std::vector<AspectRatio> aspect_ratio_grid(std::size_t total_heads) {
  if (total_heads == 0) throw ConfigError("total_heads must be positive");
  if (total_heads == 48) return {{6, 8}, {3, 16}, {2, 24}, {1, 48}};
  if (total_heads == 16) return {{4, 4}, {2, 8}, {1, 16}};
  std::vector<AspectRatio> out;
  for (std::size_t l = total_heads; l >= 1; --l)
    if (total_heads % l == 0) out.push_back({l, total_heads / l});
  return out;
}

enum class Pooling { CLS, Mean };

inline const char* pooling_name(Pooling p) { return p == Pooling::CLS ? "cls" : "mean"; }
inline Pooling pooling_from_string(const std::string& s) {
  if (s == "cls") return Pooling::CLS;
  if (s == "mean") return Pooling::Mean;
  throw ConfigError("unknown pooling: " + s + " (expected cls or mean)");
}

struct ModelConfig {
  AspectRatio ratio{1, 8};
  std::size_t embed_dim = 64;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 256;
  std::size_t seq_len = 128;
  std::size_t vocab_size = 259;
  std::size_t num_classes = 10;
  AttentionConfig attention;
  Pooling pooling = Pooling::CLS;

  /// The attention config a layer actually runs: head count and width come
  /// from the model-level fields.
  AttentionConfig layer_attention() const {
    AttentionConfig a = attention;
    a.heads = ratio.heads;
    a.head_dim = head_dim;
    return a;
  }

  bool pools_by_mean() const {
    if (attention.kind == AttentionKind::SinkhornBlock) return true;
    if (attention.kind == AttentionKind::Mixed)
      for (AttentionKind k : attention.resolved_mixed_kinds())
        if (k == AttentionKind::SinkhornBlock) return true;
    return false;
  }

  void validate() const {
    if (ratio.layers == 0 || ratio.heads == 0)
      throw ConfigError("layers and heads must be positive");
    if (embed_dim == 0 || head_dim == 0 || ffn_dim == 0 || seq_len == 0 || vocab_size == 0 ||
        num_classes == 0)
      throw ConfigError("model dimensions must be positive");
    if (vocab_size <= NUM_SPECIALS)
      throw ConfigError("vocab_size must exceed the " + std::to_string(NUM_SPECIALS) +
                        " reserved ids");
    // Sinkhorn spreads every position's mass, so CLS pooling reads a mixture;
    // it trains with mean pooling instead. Everything else uses CLS.
    if (pools_by_mean() && pooling != Pooling::Mean)
      throw ConfigError("sinkhorn_block requires mean pooling");
    if (!pools_by_mean() && pooling != Pooling::CLS)
      throw ConfigError(std::string(kind_name(attention.kind)) + " requires cls pooling");
    layer_attention().validate(seq_len);
  }
};

struct EncoderLayer {
  AttentionParams attn;
  Tensor ln1_gamma, ln1_beta;
  Tensor ffn_w1, ffn_w2;  // [E, M], [M, E], bias-free
  Tensor ln2_gamma, ln2_beta;
};

struct Model {
  ModelConfig config;
  Tensor embedding;   // [V, E]
  Tensor positional;  // [S, E]
  std::vector<EncoderLayer> layers;
  Tensor cls_w;  // [E, C]
  Tensor cls_b;  // [C]
};

/// Walks every tensor of the model in a fixed order; `fn(name, tensor,
/// trainable)`. The order defines the checkpoint layout.
template <typename F>
void visit_model_params(Model& m, F&& fn) {
  fn("embedding", m.embedding, true);
  fn("positional", m.positional, true);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    std::string lp = "layers." + std::to_string(l) + ".";
    EncoderLayer& layer = m.layers[l];
    visit_params(layer.attn, [&](const std::string& n, Tensor& t, bool train) {
      fn(lp + "attn." + n, t, train);
    });
    fn(lp + "ln1.gamma", layer.ln1_gamma, true);
    fn(lp + "ln1.beta", layer.ln1_beta, true);
    fn(lp + "ffn.w1", layer.ffn_w1, true);
    fn(lp + "ffn.w2", layer.ffn_w2, true);
    fn(lp + "ln2.gamma", layer.ln2_gamma, true);
    fn(lp + "ln2.beta", layer.ln2_beta, true);
  }
  fn("classifier.weight", m.cls_w, true);
  fn("classifier.bias", m.cls_b, true);
}

inline std::vector<Tensor> trainable_params(Model& m) {
  std::vector<Tensor> out;
  visit_model_params(m, [&](const std::string&, Tensor& t, bool train) {
    if (train) out.push_back(t);
  });
  return out;
}

/// Builds a fresh model. Every tensor draws from a stream derived from the
/// seed and the tensor's name, and initial values are rounded to float32, so
/// equal seeds give bitwise-equal models and fresh models survive the f32
/// checkpoint format bitwise.
inline Model build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  constexpr double kInitStd = 0.02;
  auto trunc = [&](const std::string& name, Shape shape) {
    Rng rng(derive_seed(seed, name));
    return Tensor::randn_truncated(std::move(shape), kInitStd, rng, true);
  };
  Model m;
  m.config = config;
  std::size_t E = config.embed_dim, M = config.ffn_dim;
  m.embedding = trunc("embedding", {config.vocab_size, E});
  m.positional = trunc("positional", {config.seq_len, E});
  AttentionConfig acfg = config.layer_attention();
  for (std::size_t l = 0; l < config.ratio.layers; ++l) {
    std::string lp = "layers." + std::to_string(l) + ".";
    EncoderLayer layer;
    layer.attn = init_attention_params(E, config.seq_len, acfg, derive_seed(seed, lp + "attn"));
    layer.ln1_gamma = Tensor::ones({E}, true);
    layer.ln1_beta = Tensor::zeros({E}, true);
    layer.ffn_w1 = trunc(lp + "ffn.w1", {E, M});
    layer.ffn_w2 = trunc(lp + "ffn.w2", {M, E});
    layer.ln2_gamma = Tensor::ones({E}, true);
    layer.ln2_beta = Tensor::zeros({E}, true);
    m.layers.push_back(std::move(layer));
  }
  m.cls_w = trunc("classifier.weight", {E, config.num_classes});
  m.cls_b = Tensor::zeros({config.num_classes}, true);
  return m;
}

/// Single-sequence pooling: CLS takes row 0, Mean averages the rows `valid`
/// marks (all rows when undefined).
inline Tensor pool(const Tensor& features, Pooling kind, const Tensor& valid = {}) {
  const Shape& fs = features.shape();
  if (fs.size() != 2) throw ShapeError("pool expects [S, E], got " + shape_str(fs));
  std::size_t S = fs[0], E = fs[1];
  Tensor batched = reshape(features, {1, S, E});
  Tensor row;
  if (kind == Pooling::CLS) {
    row = take_position(batched, 0);
  } else {
    Tensor v = valid.defined() ? reshape(valid, {1, S}) : Tensor::ones({1, S});
    row = masked_mean_pool(batched, v);
  }
  return reshape(row, {E});
}

struct ForwardResult {
  Tensor logits;                     // [B, num_classes]
  std::vector<Tensor> layer_weights; // per layer [B, H, S, S] when traced
};

/// Runs the encoder stack on a batch of padded id sequences (length B*S,
/// row-major). Padding is every position holding PAD_ID; those positions are
/// masked out of attention and pooling.
inline ForwardResult model_forward(Model& m, const std::vector<std::size_t>& ids,
                                   std::size_t batch, TraceMode trace = TraceMode::None) {
  const ModelConfig& cfg = m.config;
  std::size_t S = cfg.seq_len, E = cfg.embed_dim;
  if (ids.size() != batch * S)
    throw ShapeError("expected " + std::to_string(batch * S) + " ids for batch " +
                     std::to_string(batch) + " of length " + std::to_string(S) + ", got " +
                     std::to_string(ids.size()));

  std::vector<double> vd(batch * S);
  for (std::size_t i = 0; i < ids.size(); ++i) vd[i] = ids[i] == PAD_ID ? 0.0 : 1.0;
  Tensor valid({batch, S}, std::move(vd));

  Tensor x = add(embedding_lookup(m.embedding, ids, {batch, S}), m.positional);
  AttentionConfig acfg = cfg.layer_attention();
  ForwardResult res;
  for (EncoderLayer& layer : m.layers) {
    AttentionResult a = attention_forward(x, layer.attn, acfg, valid, trace);
    Tensor h = layer_norm(add(x, a.output), layer.ln1_gamma, layer.ln1_beta);
    Tensor f = matmul(gelu(matmul(h, layer.ffn_w1)), layer.ffn_w2);
    x = layer_norm(add(h, f), layer.ln2_gamma, layer.ln2_beta);
    if (trace != TraceMode::None) res.layer_weights.push_back(a.weights);
  }

  Tensor pooled = cfg.pooling == Pooling::CLS ? take_position(x, 0) : masked_mean_pool(x, valid);
  res.logits = add(matmul(pooled, m.cls_w), m.cls_b);
  for (double v : res.logits.data())
    if (!std::isfinite(v)) throw ContractError("non-finite logit in forward pass");
  return res;
}

/// 2LE(2AH + M): the attention projections and FFN weights of L encoder
/// layers, exactly (everything is bias-free).
inline std::uint64_t encoder_param_count(std::uint64_t layers, std::uint64_t embed,
                                         std::uint64_t head_dim, std::uint64_t heads,
                                         std::uint64_t ffn) {
  if (layers == 0 || embed == 0 || head_dim == 0 || heads == 0 || ffn == 0)
    throw ConfigError("encoder_param_count requires positive arguments");
  return 2 * layers * embed * (2 * head_dim * heads + ffn);
}

struct ParamBreakdown {
  std::uint64_t embedding = 0;
  std::uint64_t positional = 0;
  std::uint64_t attention_core = 0;   // q/k/v/output projections
  std::uint64_t attention_extra = 0;  // mechanism-specific learned tensors
  std::uint64_t ffn = 0;
  std::uint64_t norms = 0;
  std::uint64_t classifier = 0;

  std::uint64_t total() const {
    return embedding + positional + attention_core + attention_extra + ffn + norms + classifier;
  }
  /// The closed-form portion: projections plus FFN.
  std::uint64_t encoder_core() const { return attention_core + ffn; }
};

/// Enumerates the model's trainable tensors into the breakdown. Buffers
/// (feature draws) are not parameters and are not counted.
inline ParamBreakdown total_param_count(Model& m) {
  ParamBreakdown b;
  visit_model_params(m, [&](const std::string& name, Tensor& t, bool trainable) {
    if (!trainable) return;
    std::uint64_t n = t.numel();
    auto ends_with = [&](const char* suffix) {
      std::string s(suffix);
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    if (name == "embedding") b.embedding += n;
    else if (name == "positional") b.positional += n;
    else if (ends_with(".wq") || ends_with(".wk") || ends_with(".wv") || ends_with(".wo"))
      b.attention_core += n;
    else if (name.find(".attn.") != std::string::npos) b.attention_extra += n;
    else if (name.find(".ffn.") != std::string::npos) b.ffn += n;
    else if (name.find(".ln") != std::string::npos) b.norms += n;
    else if (name.rfind("classifier.", 0) == 0) b.classifier += n;
    else throw ContractError("unclassified parameter tensor: " + name);
  });
  return b;
}

}  // namespace wadn
