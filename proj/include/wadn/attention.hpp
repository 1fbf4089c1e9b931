#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "wadn/error.hpp"
#include "wadn/ops.hpp"
#include "wadn/rng.hpp"
#include "wadn/tensor.hpp"

namespace wadn {

enum class AttentionKind {
  DotProduct,
  LocalBlock,
  SlidingWindow,
  StridedSparse,
  LinearKernel,
  RandomFeature,
  LowRankProjection,
  SynthesizerDense,
  SinkhornBlock,
  Mixed,
};

inline const char* kind_name(AttentionKind k) {
  switch (k) {
    case AttentionKind::DotProduct: return "dot_product";
    case AttentionKind::LocalBlock: return "local_block";
    case AttentionKind::SlidingWindow: return "sliding_window";
    case AttentionKind::StridedSparse: return "strided_sparse";
    case AttentionKind::LinearKernel: return "linear_kernel";
    case AttentionKind::RandomFeature: return "random_feature";
    case AttentionKind::LowRankProjection: return "lowrank_projection";
    case AttentionKind::SynthesizerDense: return "synthesizer_dense";
    case AttentionKind::SinkhornBlock: return "sinkhorn_block";
    case AttentionKind::Mixed: return "mixed";
  }
  return "unknown";
}

inline AttentionKind kind_from_string(const std::string& s) {
  for (AttentionKind k :
       {AttentionKind::DotProduct, AttentionKind::LocalBlock, AttentionKind::SlidingWindow,
        AttentionKind::StridedSparse, AttentionKind::LinearKernel, AttentionKind::RandomFeature,
        AttentionKind::LowRankProjection, AttentionKind::SynthesizerDense,
        AttentionKind::SinkhornBlock, AttentionKind::Mixed})
    if (s == kind_name(k)) return k;
  throw ConfigError("unknown attention kind: " + s);
}

inline std::vector<AttentionKind> all_single_kinds() {
  return {AttentionKind::DotProduct,        AttentionKind::LocalBlock,
          AttentionKind::SlidingWindow,     AttentionKind::StridedSparse,
          AttentionKind::LinearKernel,      AttentionKind::RandomFeature,
          AttentionKind::LowRankProjection, AttentionKind::SynthesizerDense,
          AttentionKind::SinkhornBlock};
}

struct AttentionConfig {
  AttentionKind kind = AttentionKind::DotProduct;
  std::size_t heads = 8;     // total across all sub-blocks
  std::size_t head_dim = 64;
  std::size_t window = 8;          // SlidingWindow: |i - j| <= window / 2
  std::size_t block = 16;          // LocalBlock, StridedSparse, SinkhornBlock
  std::size_t stride = 8;          // StridedSparse
  std::size_t rank = 64;           // LowRankProjection
  std::size_t features = 64;       // RandomFeature
  std::size_t sinkhorn_iters = 5;  // SinkhornBlock
  std::uint64_t seed = 0;          // extra salt for the parameter streams; 0 leaves them alone
  std::vector<AttentionKind> mixed_kinds;  // Mixed; empty means the default blend

  /// Default blend: every kind that tolerates generic pooling, eight in all,
  /// so 48 heads split as 6 per block.
  std::vector<AttentionKind> resolved_mixed_kinds() const {
    if (!mixed_kinds.empty()) return mixed_kinds;
    return {AttentionKind::DotProduct,        AttentionKind::LocalBlock,
            AttentionKind::SlidingWindow,     AttentionKind::StridedSparse,
            AttentionKind::LinearKernel,      AttentionKind::RandomFeature,
            AttentionKind::LowRankProjection, AttentionKind::SynthesizerDense};
  }

  /// Sub-block kinds: the mixture list, or just the kind itself.
  std::vector<AttentionKind> block_kinds() const {
    if (kind == AttentionKind::Mixed) return resolved_mixed_kinds();
    return {kind};
  }

  std::size_t heads_per_block() const {
    std::size_t k = block_kinds().size();
    return heads / k;
  }

  void validate(std::size_t seq_len) const {
    if (heads == 0 || head_dim == 0) throw ConfigError("heads and head_dim must be positive");
    auto check_single = [&](AttentionKind k) {
      switch (k) {
        case AttentionKind::LocalBlock:
          if (block == 0) throw ConfigError("local_block requires block >= 1");
          break;
        case AttentionKind::SlidingWindow:
          if (window == 0) throw ConfigError("sliding_window requires window >= 1");
          break;
        case AttentionKind::StridedSparse:
          if (block == 0 || stride == 0)
            throw ConfigError("strided_sparse requires block >= 1 and stride >= 1");
          break;
        case AttentionKind::LinearKernel:
          break;
        case AttentionKind::RandomFeature:
          if (features == 0) throw ConfigError("random_feature requires features >= 1");
          break;
        case AttentionKind::LowRankProjection:
          if (rank == 0) throw ConfigError("lowrank_projection requires rank >= 1");
          if (rank > seq_len)
            throw ConfigError("lowrank_projection requires rank <= seq_len, got rank " +
                              std::to_string(rank) + " for seq_len " + std::to_string(seq_len));
          break;
        case AttentionKind::SynthesizerDense:
          break;
        case AttentionKind::SinkhornBlock:
          if (block == 0 || sinkhorn_iters == 0)
            throw ConfigError("sinkhorn_block requires block >= 1 and sinkhorn_iters >= 1");
          if (seq_len % block != 0)
            throw ConfigError("sinkhorn_block requires block to divide seq_len (" +
                              std::to_string(block) + " does not divide " +
                              std::to_string(seq_len) + ")");
          break;
        case AttentionKind::DotProduct:
          break;
        case AttentionKind::Mixed:
          throw ConfigError("mixed cannot nest inside mixed");
      }
    };
    if (kind == AttentionKind::Mixed) {
      auto kinds = resolved_mixed_kinds();
      if (kinds.empty()) throw ConfigError("mixed needs at least one sub-kind");
      if (heads % kinds.size() != 0)
        throw ConfigError("mixed requires heads (" + std::to_string(heads) +
                          ") divisible by the number of sub-kinds (" +
                          std::to_string(kinds.size()) + ")");
      for (AttentionKind k : kinds) check_single(k);
    } else {
      check_single(kind);
    }
  }
};

/// Static [S, S] permitted-pair mask for the sparse patterns; all-ones for
/// dense kinds. Kinds whose pattern is data-dependent have no static mask.
inline Tensor build_mask(AttentionKind kind, std::size_t seq_len, const AttentionConfig& cfg) {
  std::vector<double> m(seq_len * seq_len, 0.0);
  switch (kind) {
    case AttentionKind::DotProduct:
    case AttentionKind::SynthesizerDense:
      std::fill(m.begin(), m.end(), 1.0);
      break;
    case AttentionKind::LocalBlock:
      for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = 0; j < seq_len; ++j)
          if (i / cfg.block == j / cfg.block) m[i * seq_len + j] = 1.0;
      break;
    case AttentionKind::SlidingWindow: {
      std::size_t half = cfg.window / 2;
      for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = 0; j < seq_len; ++j) {
          std::size_t d = i > j ? i - j : j - i;
          if (d <= half) m[i * seq_len + j] = 1.0;
        }
      break;
    }
    case AttentionKind::StridedSparse:
      for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = 0; j < seq_len; ++j)
          if (i / cfg.block == j / cfg.block || i % cfg.stride == j % cfg.stride)
            m[i * seq_len + j] = 1.0;
      break;
    default:
      throw ConfigError(std::string("no static mask for attention kind ") + kind_name(kind));
  }
  return Tensor({seq_len, seq_len}, std::move(m));
}

struct Qkv {
  Tensor q, k, v;  // each [B, Hb, S, A]
};

/// One multi-head block: a mixture layer owns several of these, a homogeneous
/// layer exactly one. Per-head extras stay default-constructed for kinds that
/// do not use them, and are kept as distinct tensors per head.
struct MultiHeadParams {
  Tensor wq, wk, wv;  // [E, Hb*A]
  Tensor wo;          // [Hb*A, E]
  std::vector<Tensor> synth_hidden;   // [A, A]
  std::vector<Tensor> synth_score;    // [A, S]
  std::vector<Tensor> proj_k;         // [rank, S]
  std::vector<Tensor> proj_v;         // [rank, S]
  std::vector<Tensor> sort_weights;   // [A, S/block]
  std::vector<Tensor> feature_draws;  // [features, A], fixed random buffer
};

/// A whole attention layer: one block per sub-kind (one total unless mixed).
struct AttentionParams {
  std::vector<MultiHeadParams> blocks;
};

namespace detail {

inline Tensor randn_full_f32(Shape shape, Rng& rng) {
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = static_cast<double>(static_cast<float>(rng.normal()));
  return Tensor(std::move(shape), std::move(data));
}

inline MultiHeadParams init_block(std::size_t embed, std::size_t seq_len, AttentionKind kind,
                                  std::size_t heads, const AttentionConfig& cfg,
                                  std::uint64_t seed, const std::string& prefix) {
  std::size_t A = cfg.head_dim, HA = heads * A;
  constexpr double kInitStd = 0.02;
  auto trunc = [&](const std::string& name, Shape shape) {
    Rng rng(derive_seed(seed, prefix + name));
    return Tensor::randn_truncated(std::move(shape), kInitStd, rng, true);
  };
  MultiHeadParams p;
  p.wq = trunc("wq", {embed, HA});
  p.wk = trunc("wk", {embed, HA});
  p.wv = trunc("wv", {embed, HA});
  p.wo = trunc("wo", {HA, embed});
  p.synth_hidden.resize(heads);
  p.synth_score.resize(heads);
  p.proj_k.resize(heads);
  p.proj_v.resize(heads);
  p.sort_weights.resize(heads);
  p.feature_draws.resize(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    std::string hp = "head" + std::to_string(h) + ".";
    switch (kind) {
      case AttentionKind::SynthesizerDense:
        p.synth_hidden[h] = trunc(hp + "synth_hidden", {A, A});
        p.synth_score[h] = trunc(hp + "synth_score", {A, seq_len});
        break;
      case AttentionKind::LowRankProjection:
        p.proj_k[h] = trunc(hp + "proj_k", {cfg.rank, seq_len});
        p.proj_v[h] = trunc(hp + "proj_v", {cfg.rank, seq_len});
        break;
      case AttentionKind::SinkhornBlock:
        p.sort_weights[h] = trunc(hp + "sort_weights", {A, seq_len / cfg.block});
        break;
      case AttentionKind::RandomFeature: {
        Rng rng(derive_seed(seed, prefix + hp + "feature_draws"));
        p.feature_draws[h] = detail::randn_full_f32({cfg.features, A}, rng);
        break;
      }
      default:
        break;
    }
  }
  return p;
}

}  // namespace detail

/// Fresh parameters for a whole attention layer. Every tensor draws from its
/// own stream derived from `seed` and its role name, so two builds with the
/// same seed agree tensor by tensor regardless of construction order.
inline AttentionParams init_attention_params(std::size_t embed, std::size_t seq_len,
                                             const AttentionConfig& cfg, std::uint64_t seed) {
  cfg.validate(seq_len);
  if (cfg.seed != 0) {
    std::uint64_t salted = seed ^ cfg.seed;
    seed = splitmix64(salted);
  }
  auto kinds = cfg.block_kinds();
  std::size_t hb = cfg.heads_per_block();
  AttentionParams p;
  for (std::size_t b = 0; b < kinds.size(); ++b) {
    std::string prefix = kinds.size() == 1 ? "" : "block" + std::to_string(b) + ".";
    p.blocks.push_back(detail::init_block(embed, seq_len, kinds[b], hb, cfg, seed, prefix));
  }
  return p;
}

/// Walks every tensor of the layer in a fixed order. `fn(name, tensor,
/// trainable)`; feature draws are buffers, not parameters.
template <typename F>
void visit_params(AttentionParams& p, F&& fn) {
  for (std::size_t b = 0; b < p.blocks.size(); ++b) {
    std::string bp = p.blocks.size() == 1 ? "" : "block" + std::to_string(b) + ".";
    MultiHeadParams& blk = p.blocks[b];
    fn(bp + "wq", blk.wq, true);
    fn(bp + "wk", blk.wk, true);
    fn(bp + "wv", blk.wv, true);
    fn(bp + "wo", blk.wo, true);
    for (std::size_t h = 0; h < blk.synth_hidden.size(); ++h) {
      std::string hp = bp + "head" + std::to_string(h) + ".";
      if (blk.synth_hidden[h].defined()) fn(hp + "synth_hidden", blk.synth_hidden[h], true);
      if (blk.synth_score[h].defined()) fn(hp + "synth_score", blk.synth_score[h], true);
      if (blk.proj_k[h].defined()) fn(hp + "proj_k", blk.proj_k[h], true);
      if (blk.proj_v[h].defined()) fn(hp + "proj_v", blk.proj_v[h], true);
      if (blk.sort_weights[h].defined()) fn(hp + "sort_weights", blk.sort_weights[h], true);
      if (blk.feature_draws[h].defined()) fn(hp + "feature_draws", blk.feature_draws[h], false);
    }
  }
}

/// [B, S, E] input to per-head [B, Hb, S, A] query/key/value.
inline Qkv project_qkv(const Tensor& x, const MultiHeadParams& p, std::size_t heads,
                       std::size_t head_dim) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("project_qkv expects [B, S, E], got " + shape_str(xs));
  std::size_t B = xs[0], S = xs[1];
  auto split = [&](const Tensor& w) {
    Tensor flat = matmul(x, w);  // [B, S, Hb*A]
    Tensor byhead = reshape(flat, {B, S, heads, head_dim});
    return permute(byhead, {0, 2, 1, 3});
  };
  return {split(p.wq), split(p.wk), split(p.wv)};
}

struct AttnOut {
  Tensor out;      // [B, Hb, S, A]
  Tensor weights;  // [B, Hb, S, S] when traced, undefined otherwise
};

/// softmax(Q K^T / sqrt(A)) V with optional sparsity mask and sequence
/// validity. The workhorse behind the dense and static-sparse kinds.
inline AttnOut scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const Tensor& mask2d, const Tensor& valid, bool want_weights) {
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Tensor scores = scale(matmul_nt(q, k), inv_sqrt);
  Tensor w = masked_softmax(scores, mask2d, valid, valid);
  AttnOut r;
  r.out = matmul(w, v);
  if (want_weights) r.weights = w.detach();
  return r;
}

namespace detail {

/// Shared tail of the two kernelized kinds: out_i = phi(q_i) (phi(K)^T V) /
/// (phi(q_i) . sum_j phi(k_j)). Padded keys must already be zeroed in fk.
inline AttnOut kernelized_attention(const Tensor& fq, const Tensor& fk, const Tensor& v,
                                    bool dense_weights) {
  std::size_t m = fq.shape().back();
  Tensor kv = matmul(transpose_last2(fk), v);  // [B, Hb, m, A]
  Shape zshape = fk.shape();
  zshape[zshape.size() - 2] = m;
  zshape[zshape.size() - 1] = 1;
  Tensor z = reshape(sum_axis(fk, 2), zshape);  // [B, Hb, m, 1]
  Tensor denom = matmul(fq, z);                 // [B, Hb, S, 1]
  AttnOut r;
  r.out = mul(matmul(fq, kv), reciprocal(denom));
  if (dense_weights) {
    NoGradGuard ng;
    Tensor w = matmul_nt(fq.detach(), fk.detach());
    r.weights = mul(w, reciprocal(denom.detach()));
  }
  return r;
}

inline Tensor valid_as_key_gate(const Tensor& valid, std::size_t B, std::size_t S) {
  return reshape(valid, {B, 1, S, 1});
}

}  // namespace detail

/// Kernelized attention with the elu(x)+1 feature map; linear in sequence
/// length. `dense_weights` additionally materializes the equivalent S x S
/// row-stochastic matrix for tracing.
inline AttnOut linear_kernel_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                       const Tensor& valid, bool dense_weights = false) {
  Tensor fq = elu_plus_one(q);
  Tensor fk = elu_plus_one(k);
  if (valid.defined()) fk = mul(fk, detail::valid_as_key_gate(valid, q.dim(0), q.dim(2)));
  return detail::kernelized_attention(fq, fk, v, dense_weights);
}

/// Positive random features phi(x) = exp(w.x - |x|^2 / 2) / sqrt(m) on
/// A^(-1/4)-scaled inputs; draws is [Hb, m, A] and stays fixed.
inline AttnOut random_feature_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                        const Tensor& draws, const Tensor& valid,
                                        bool dense_weights = false) {
  std::size_t A = q.shape().back();
  std::size_t m = draws.dim(draws.rank() - 2);
  double pre = std::pow(static_cast<double>(A), -0.25);
  auto featurize = [&](const Tensor& t) {
    Tensor ts = scale(t, pre);
    Tensor proj = matmul_nt(ts, draws);  // [B, Hb, S, m]
    Shape nshape = ts.shape();
    nshape.back() = 1;
    Tensor half_sq = reshape(scale(sum_axis(mul(ts, ts), 3), 0.5), nshape);
    return scale(wadn::exp(sub(proj, half_sq)), 1.0 / std::sqrt(static_cast<double>(m)));
  };
  Tensor fq = featurize(q);
  Tensor fk = featurize(k);
  if (valid.defined()) fk = mul(fk, detail::valid_as_key_gate(valid, q.dim(0), q.dim(2)));
  return detail::kernelized_attention(fq, fk, v, dense_weights);
}

/// Keys and values projected to a fixed rank along the sequence axis before
/// ordinary softmax attention. The projections mix positions, so no
/// position-aligned weight matrix exists and sequence validity is not
/// consulted.
inline AttnOut lowrank_projection_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                            const Tensor& proj_k, const Tensor& proj_v) {
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Tensor kp = matmul(proj_k, k);  // [B, Hb, rank, A]
  Tensor vp = matmul(proj_v, v);
  Tensor w = softmax_lastdim(scale(matmul_nt(q, kp), inv_sqrt));  // [B, Hb, S, rank]
  AttnOut r;
  r.out = matmul(w, vp);
  return r;
}

/// Scores synthesized from each query alone through a per-head two-layer map
/// A -> A -> S; no key interaction.
inline AttnOut synthesizer_dense_attention(const Tensor& q, const Tensor& v, const Tensor& w1,
                                           const Tensor& w2, const Tensor& valid,
                                           bool want_weights) {
  Tensor hidden = relu(matmul(q, w1));  // [B, Hb, S, A]
  Tensor scores = matmul(hidden, w2);   // [B, Hb, S, S]
  Tensor w = masked_softmax(scores, {}, valid, valid);
  AttnOut r;
  r.out = matmul(w, v);
  if (want_weights) r.weights = w.detach();
  return r;
}

/// Alternating column and row normalization of a positive matrix over the
/// last two dims. Ends on the row step, so rows sum to one exactly.
inline Tensor sinkhorn_normalize(const Tensor& m, std::size_t iters) {
  const Shape& ms = m.shape();
  if (ms.size() < 2 || ms[ms.size() - 1] != ms[ms.size() - 2])
    throw ShapeError("sinkhorn_normalize needs square trailing dims, got " + shape_str(ms));
  std::size_t rank = ms.size();
  Tensor cur = m;
  for (std::size_t it = 0; it < iters; ++it) {
    cur = mul(cur, reciprocal(sum_axis(cur, rank - 2, true)));
    cur = mul(cur, reciprocal(sum_axis(cur, rank - 1, true)));
  }
  return cur;
}

/// Block-sorted attention: block summaries score a soft permutation, the
/// permutation remixes key/value blocks, and queries attend within their own
/// block of the remix. Requires block | S; sequence validity is ignored
/// because the soft permutation spreads every position's mass.
inline AttnOut sinkhorn_block_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                        const Tensor& sort_weights, std::size_t block,
                                        std::size_t iters, bool want_weights) {
  std::size_t B = q.dim(0), Hb = q.dim(1), S = q.dim(2), A = q.dim(3);
  if (block == 0 || S % block != 0)
    throw ConfigError("sinkhorn_block requires block (" + std::to_string(block) +
                      ") to divide seq_len (" + std::to_string(S) + ")");
  std::size_t nb = S / block;
  Tensor k5 = reshape(k, {B, Hb, nb, block, A});
  Tensor summaries = mean_axis(k5, 3);              // [B, Hb, nb, A]
  Tensor logits = matmul(summaries, sort_weights);  // [B, Hb, nb, nb]
  // Global shift before exp: sinkhorn output is invariant to it, and it keeps
  // the exponentials bounded.
  double mx = *std::max_element(logits.data().begin(), logits.data().end());
  Tensor p = sinkhorn_normalize(wadn::exp(add_scalar(logits, -mx)), iters);

  Tensor kp = reshape(matmul(p, reshape(k, {B, Hb, nb, block * A})), {B, Hb, nb, block, A});
  Tensor vp = reshape(matmul(p, reshape(v, {B, Hb, nb, block * A})), {B, Hb, nb, block, A});
  Tensor q5 = reshape(q, {B, Hb, nb, block, A});
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(A));
  Tensor w_in = softmax_lastdim(scale(matmul_nt(q5, kp), inv_sqrt));  // [B,Hb,nb,bs,bs]
  AttnOut r;
  r.out = reshape(matmul(w_in, vp), {B, Hb, S, A});
  if (want_weights) {
    // Equivalent position-aligned weights: W[i, m*block + j] =
    // w_in[blk(i), i', j] * P[blk(i), m]. Rows inherit sum one from both factors.
    std::vector<double> w(B * Hb * S * S, 0.0);
    const double* wi = w_in.data().data();
    const double* pd = p.data().data();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t g = 0; g < Hb; ++g)
        for (std::size_t bi = 0; bi < nb; ++bi)
          for (std::size_t ii = 0; ii < block; ++ii) {
            std::size_t row = bi * block + ii;
            const double* win_row = wi + (((b * Hb + g) * nb + bi) * block + ii) * block;
            const double* p_row = pd + ((b * Hb + g) * nb + bi) * nb;
            double* dst = w.data() + ((b * Hb + g) * S + row) * S;
            for (std::size_t m = 0; m < nb; ++m)
              for (std::size_t jj = 0; jj < block; ++jj)
                dst[m * block + jj] = p_row[m] * win_row[jj];
          }
    r.weights = Tensor({B, Hb, S, S}, std::move(w));
  }
  return r;
}

enum class TraceMode { None, Exact, Dense };

inline bool kind_traceable(AttentionKind k, TraceMode mode) {
  if (mode == TraceMode::None) return true;
  switch (k) {
    case AttentionKind::LowRankProjection:
      return false;
    case AttentionKind::LinearKernel:
    case AttentionKind::RandomFeature:
      return mode == TraceMode::Dense;
    default:
      return true;
  }
}

struct AttentionResult {
  Tensor output;   // [B, S, E]
  Tensor weights;  // [B, H, S, S] when traced
};

namespace detail {

inline Tensor stack_heads(const std::vector<Tensor>& per_head) {
  std::vector<Tensor> parts;
  parts.reserve(per_head.size());
  for (const Tensor& t : per_head) {
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    Tensor c = t;
    parts.push_back(reshape(c, s));
  }
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

}  // namespace detail

/// One multi-head block of a single mechanism over [B, S, E]: shared
/// q/k/v/output projections around the per-kind attention core. `valid` is
/// [B, S] sequence validity (undefined means every position is real).
inline AttentionResult multi_head_forward(const Tensor& x, const MultiHeadParams& p,
                                          AttentionKind kind, const AttentionConfig& cfg,
                                          const Tensor& valid, TraceMode trace = TraceMode::None) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("attention input must be [B, S, E], got " + shape_str(xs));
  std::size_t B = xs[0], S = xs[1];
  std::size_t hb = p.wq.dim(1) / cfg.head_dim;
  if (!kind_traceable(kind, trace))
    throw ContractError(std::string("attention weights are not position-aligned for kind ") +
                        kind_name(kind) +
                        (kind == AttentionKind::LowRankProjection ? ""
                                                                  : "; dense tracing is required"));

  Qkv qkv = project_qkv(x, p, hb, cfg.head_dim);
  bool want_w = trace != TraceMode::None;
  bool dense_w = trace == TraceMode::Dense;

  AttnOut r;
  switch (kind) {
    case AttentionKind::DotProduct:
      r = scaled_dot_attention(qkv.q, qkv.k, qkv.v, {}, valid, want_w);
      break;
    case AttentionKind::LocalBlock:
    case AttentionKind::SlidingWindow:
    case AttentionKind::StridedSparse:
      r = scaled_dot_attention(qkv.q, qkv.k, qkv.v, build_mask(kind, S, cfg), valid, want_w);
      break;
    case AttentionKind::LinearKernel:
      r = linear_kernel_attention(qkv.q, qkv.k, qkv.v, valid, dense_w);
      break;
    case AttentionKind::RandomFeature:
      r = random_feature_attention(qkv.q, qkv.k, qkv.v, detail::stack_heads(p.feature_draws),
                                   valid, dense_w);
      break;
    case AttentionKind::LowRankProjection:
      r = lowrank_projection_attention(qkv.q, qkv.k, qkv.v, detail::stack_heads(p.proj_k),
                                       detail::stack_heads(p.proj_v));
      break;
    case AttentionKind::SynthesizerDense:
      r = synthesizer_dense_attention(qkv.q, qkv.v, detail::stack_heads(p.synth_hidden),
                                      detail::stack_heads(p.synth_score), valid, want_w);
      break;
    case AttentionKind::SinkhornBlock:
      r = sinkhorn_block_attention(qkv.q, qkv.k, qkv.v, detail::stack_heads(p.sort_weights),
                                   cfg.block, cfg.sinkhorn_iters, want_w);
      break;
    case AttentionKind::Mixed:
      throw ConfigError("multi_head_forward runs a single mechanism; use attention_forward");
  }

  Tensor byseq = permute(r.out, {0, 2, 1, 3});  // [B, S, Hb, A]
  AttentionResult res;
  res.output = matmul(reshape(byseq, {B, S, hb * cfg.head_dim}), p.wo);
  if (want_w) res.weights = r.weights;
  return res;
}

/// One block per sub-kind, each with heads/|kinds| heads; the blocks'
/// sequence-feature outputs are averaged and their head matrices
/// concatenated.
inline AttentionResult mixed_attention_forward(const Tensor& x, const AttentionParams& p,
                                               const AttentionConfig& cfg, const Tensor& valid,
                                               TraceMode trace = TraceMode::None) {
  if (cfg.kind != AttentionKind::Mixed)
    throw ConfigError("mixed_attention_forward requires kind = mixed");
  cfg.validate(x.dim(1));
  auto kinds = cfg.block_kinds();
  if (p.blocks.size() != kinds.size())
    throw ConfigError("mixture has " + std::to_string(p.blocks.size()) + " blocks but " +
                      std::to_string(kinds.size()) + " sub-kinds");
  Tensor sum;
  std::vector<Tensor> weights;
  for (std::size_t b = 0; b < kinds.size(); ++b) {
    AttentionResult r = multi_head_forward(x, p.blocks[b], kinds[b], cfg, valid, trace);
    sum = b == 0 ? r.output : add(sum, r.output);
    if (trace != TraceMode::None) weights.push_back(r.weights);
  }
  AttentionResult res;
  res.output = scale(sum, 1.0 / static_cast<double>(kinds.size()));
  if (trace != TraceMode::None)
    res.weights = weights.size() == 1 ? weights[0] : concat(weights, 1);
  return res;
}

/// Whole attention layer: dispatches between a homogeneous block and a
/// mixture.
inline AttentionResult attention_forward(const Tensor& x, const AttentionParams& p,
                                         const AttentionConfig& cfg, const Tensor& valid,
                                         TraceMode trace = TraceMode::None) {
  if (cfg.kind == AttentionKind::Mixed) return mixed_attention_forward(x, p, cfg, valid, trace);
  if (p.blocks.size() != 1) throw ConfigError("homogeneous layer expects exactly one block");
  return multi_head_forward(x, p.blocks[0], cfg.kind, cfg, valid, trace);
}

}  // namespace wadn
