#pragma once

#include "unicue/layers.hpp"

// Semantic alignment pool: a transformer text encoder into the shared latent
// space plus the bidirectional cosine losses tying video and pose embeddings
// to text. The losses compare mean-pooled sequence embeddings.

namespace unicue {

template <class S>
struct TextEmbedding {
  Tensor<S> tokens;  // (N,D)
  Tensor<S> pooled;  // (D)
};

template <class S>
struct TextEncoder {
  Embedding<S> embed;
  TransformerEncoder<S> encoder;

  TextEncoder() = default;
  TextEncoder(int vocab, AttentionConfig cfg, int depth, Rng& rng)
      : embed(vocab, cfg.dim, rng), encoder(cfg, depth, rng) {}

  TextEmbedding<S> forward(const std::vector<int>& ids) const {
    // sqrt(D)-scaled embeddings keep content comparable to the position code
    const S emb_scale = std::sqrt(static_cast<S>(embed.table.dim(1)));
    Tensor<S> h = add_positional(scale(embed.forward(ids), emb_scale));
    Tensor<S> tokens = encoder.forward(h);
    return {tokens, mean_axis0(tokens)};
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    embed.collect(prefix + ".embed", out);
    encoder.collect(prefix + ".enc", out);
  }
};

// 1 - cos(a, b) on two vectors; range [0, 2]. A zero-norm input yields a
// loss of exactly 1 with zero gradient (epsilon-guarded convention).
template <class S>
Tensor<S> cosine_align_loss(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.numel() != b.numel())
    throw std::invalid_argument("cosine_align_loss: dimensions disagree, " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const size_t n = a.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S dot = S(0), na2 = S(0), nb2 = S(0);
  for (size_t i = 0; i < n; ++i) {
    dot += pa[i] * pb[i];
    na2 += pa[i] * pa[i];
    nb2 += pb[i] * pb[i];
  }
  const S na = std::sqrt(na2);
  const S nb = std::sqrt(nb2);
  const S denom = na * nb;
  const bool degenerate = denom < S(1e-8);
  const bool tracked = detail::track(a) || detail::track(b);
  Tensor<S> out = detail::make_out<S>({1}, tracked);
  out.data()[0] = degenerate ? S(1) : S(1) - dot / denom;
  if (tracked) {
    Tensor<S> av = a, bv = b, ov = out;
    detail::record<S>(out, [av, bv, ov, dot, na, nb, degenerate, n]() mutable {
      if (degenerate) return;  // documented zero-gradient convention
      const S g = ov.grad()[0];
      const S* pa = av.data();
      const S* pb = bv.data();
      const S inv = S(1) / (na * nb);
      if (av.requires_grad()) {
        S* ga = av.grad();
        const S c = dot / (na * na);
        for (size_t i = 0; i < n; ++i) ga[i] += -g * inv * (pb[i] - c * pa[i]);
      }
      if (bv.requires_grad()) {
        S* gb = bv.grad();
        const S c = dot / (nb * nb);
        for (size_t i = 0; i < n; ++i) gb[i] += -g * inv * (pa[i] - c * pb[i]);
      }
    });
  }
  return out;
}

// L_S: video<->text plus pose<->text terms over pooled embeddings
template <class S>
Tensor<S> alignment_pool_loss(const Tensor<S>& zv_pooled, const Tensor<S>& zp_pooled, const Tensor<S>& zt_pooled) {
  return add(cosine_align_loss(zv_pooled, zt_pooled), cosine_align_loss(zp_pooled, zt_pooled));
}

}  // namespace unicue
