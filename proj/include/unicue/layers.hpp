#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unicue/tensor.hpp"

// Neural building blocks: linear/MLP, layer norm, multi-head attention,
// pre-norm transformer encoder/decoder blocks, a residual 2-D conv stack
// and a temporal 1-D conv. All parameters are registered by name so the
// optimizer and checkpoints can address them.

namespace unicue {

template <class S>
struct ParamRef {
  std::string name;
  Tensor<S> tensor;
};

template <class S>
using ParamList = std::vector<ParamRef<S>>;

template <class S>
inline void add_param(ParamList<S>& out, const std::string& name, const Tensor<S>& t) {
  out.push_back({name, t});
}

// ---------------------------------------------------------------------------
// linear / MLP
// ---------------------------------------------------------------------------

template <class S>
struct Linear {
  Tensor<S> w;  // (in, out)
  Tensor<S> b;  // (out), absent if bias = false

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool bias = true, bool zero_init = false) {
    w = zero_init ? Tensor<S>({in, out}, true) : Tensor<S>::uniform_init({in, out}, in, rng);
    if (bias) b = Tensor<S>({out}, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    Tensor<S> y = matmul(x, w);
    if (b.defined()) y = add(y, b);
    return y;
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    add_param(out, prefix + ".w", w);
    if (b.defined()) add_param(out, prefix + ".b", b);
  }
};

// affine -> relu -> affine
template <class S>
struct Mlp {
  Linear<S> l1, l2;

  Mlp() = default;
  Mlp(int in, int hidden, int out, Rng& rng, bool zero_init_out = false)
      : l1(in, hidden, rng), l2(hidden, out, rng, true, zero_init_out) {}

  Tensor<S> forward(const Tensor<S>& x) const { return l2.forward(relu(l1.forward(x))); }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    l1.collect(prefix + ".l1", out);
    l2.collect(prefix + ".l2", out);
  }
};

template <class S>
struct LayerNorm {
  Tensor<S> gamma, beta;

  LayerNorm() = default;
  explicit LayerNorm(int dim) {
    gamma = Tensor<S>::full({dim}, S(1));
    gamma.set_requires_grad(true);
    beta = Tensor<S>({dim}, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    add_param(out, prefix + ".g", gamma);
    add_param(out, prefix + ".b", beta);
  }
};

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

struct AttentionConfig {
  int dim = 64;
  int heads = 4;
  int head_dim() const { return dim / heads; }
};

// additive mask: 0 on allowed pairs, large negative on disallowed ones.
// -1e30 underflows to an exact zero weight after max-subtracted softmax
// while keeping every intermediate value finite.
template <class S>
Tensor<S> causal_mask(int len) {
  Tensor<S> m({len, len});
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j) m.at({i, j}) = S(-1e30);
  return m;
}

template <class S>
struct MultiHeadAttention {
  AttentionConfig cfg;
  Linear<S> wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(AttentionConfig c, Rng& rng, bool zero_init_out = true) : cfg(c) {
    if (cfg.dim % cfg.heads != 0)
      throw std::invalid_argument("attention: dim " + std::to_string(cfg.dim) + " not divisible by heads " +
                                  std::to_string(cfg.heads));
    // pure projection matrices; a key bias would be softmax-invariant anyway
    wq = Linear<S>(cfg.dim, cfg.dim, rng, /*bias=*/false);
    wk = Linear<S>(cfg.dim, cfg.dim, rng, /*bias=*/false);
    wv = Linear<S>(cfg.dim, cfg.dim, rng, /*bias=*/false);
    wo = Linear<S>(cfg.dim, cfg.dim, rng, true, zero_init_out);
  }

  // query_src (Lq,D), kv_src (Lk,D), mask (Lq,Lk) additive or null
  Tensor<S> forward(const Tensor<S>& query_src, const Tensor<S>& kv_src, const Tensor<S>* mask = nullptr) const {
    if (query_src.dim(1) != cfg.dim || kv_src.dim(1) != cfg.dim)
      throw std::invalid_argument("attention: model dim mismatch, query " + shape_str(query_src.shape()) +
                                  " kv " + shape_str(kv_src.shape()) + " dim " + std::to_string(cfg.dim));
    if (kv_src.dim(0) == 0) throw std::invalid_argument("attention: empty key/value sequence");
    if (mask && (mask->dim(0) != query_src.dim(0) || mask->dim(1) != kv_src.dim(0)))
      throw std::invalid_argument("attention: mask shape " + shape_str(mask->shape()) +
                                  " does not match (Lq,Lk)=(" + std::to_string(query_src.dim(0)) + "," +
                                  std::to_string(kv_src.dim(0)) + ")");
    const int hd = cfg.head_dim();
    const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(hd));
    Tensor<S> q = wq.forward(query_src);
    Tensor<S> k = wk.forward(kv_src);
    Tensor<S> v = wv.forward(kv_src);
    Tensor<S> merged;
    for (int h = 0; h < cfg.heads; ++h) {
      Tensor<S> qh = slice_cols(q, h * hd, (h + 1) * hd);
      Tensor<S> kh = slice_cols(k, h * hd, (h + 1) * hd);
      Tensor<S> vh = slice_cols(v, h * hd, (h + 1) * hd);
      Tensor<S> scores = scale(matmul_nt(qh, kh), inv_sqrt_d);
      if (mask) scores = add(scores, *mask);
      Tensor<S> probs = softmax(scores, 1);
      Tensor<S> ctx = matmul(probs, vh);
      merged = h == 0 ? ctx : concat_cols(merged, ctx);
    }
    return wo.forward(merged);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
  }
};

// ---------------------------------------------------------------------------
// transformer blocks (pre-norm)
// ---------------------------------------------------------------------------

template <class S>
struct EncoderBlock {
  LayerNorm<S> ln1, ln2;
  MultiHeadAttention<S> attn;
  Mlp<S> mlp;

  EncoderBlock() = default;
  EncoderBlock(AttentionConfig c, Rng& rng)
      : ln1(c.dim), ln2(c.dim), attn(c, rng), mlp(c.dim, 4 * c.dim, c.dim, rng) {}

  Tensor<S> forward(const Tensor<S>& x) const {
    Tensor<S> n1 = ln1.forward(x);
    Tensor<S> h = add(x, attn.forward(n1, n1));
    return add(h, mlp.forward(ln2.forward(h)));
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    attn.collect(prefix + ".attn", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

template <class S>
struct DecoderBlock {
  LayerNorm<S> ln1, ln2, ln3;
  MultiHeadAttention<S> self_attn, cross_attn;
  Mlp<S> mlp;

  DecoderBlock() = default;
  // the cross-attention out-projection starts live: a zero-initialized one
  // delays any gradient into the memory pathway until after the decoder has
  // settled on prefix-only statistics, and the memory never gets used
  DecoderBlock(AttentionConfig c, Rng& rng)
      : ln1(c.dim), ln2(c.dim), ln3(c.dim), self_attn(c, rng),
        cross_attn(c, rng, /*zero_init_out=*/false), mlp(c.dim, 4 * c.dim, c.dim, rng) {}

  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& memory, const Tensor<S>& mask) const {
    Tensor<S> n1 = ln1.forward(x);
    Tensor<S> h = add(x, self_attn.forward(n1, n1, &mask));
    h = add(h, cross_attn.forward(ln2.forward(h), memory));
    return add(h, mlp.forward(ln3.forward(h)));
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
    ln3.collect(prefix + ".ln3", out);
    self_attn.collect(prefix + ".self", out);
    cross_attn.collect(prefix + ".cross", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

template <class S>
struct TransformerEncoder {
  std::vector<EncoderBlock<S>> blocks;
  LayerNorm<S> final_ln;

  TransformerEncoder() = default;
  TransformerEncoder(AttentionConfig c, int depth, Rng& rng) : final_ln(c.dim) {
    for (int i = 0; i < depth; ++i) blocks.emplace_back(c, rng);
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    Tensor<S> h = x;
    for (const auto& b : blocks) h = b.forward(h);
    return final_ln.forward(h);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".blk" + std::to_string(i), out);
    final_ln.collect(prefix + ".ln", out);
  }
};

template <class S>
struct TransformerDecoder {
  std::vector<DecoderBlock<S>> blocks;
  LayerNorm<S> final_ln;

  TransformerDecoder() = default;
  TransformerDecoder(AttentionConfig c, int depth, Rng& rng) : final_ln(c.dim) {
    for (int i = 0; i < depth; ++i) blocks.emplace_back(c, rng);
  }

  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& memory, const Tensor<S>& mask) const {
    if (mask.dim(0) != x.dim(0) || mask.dim(1) != x.dim(0))
      throw std::invalid_argument("decoder: mask " + shape_str(mask.shape()) + " does not match sequence length " +
                                  std::to_string(x.dim(0)));
    Tensor<S> h = x;
    for (const auto& b : blocks) h = b.forward(h, memory, mask);
    return final_ln.forward(h);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".blk" + std::to_string(i), out);
    final_ln.collect(prefix + ".ln", out);
  }
};

// ---------------------------------------------------------------------------
// convolutional blocks
// ---------------------------------------------------------------------------

// largest group count <= 4 dividing the channel count
inline int norm_groups(int channels) {
  for (int g = std::min(4, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

// One stride-2 residual stage with group normalization:
// y = relu(gn2(conv3x3_s1(relu(gn1(conv3x3_s2(x))))) + conv1x1_s2(x))
template <class S>
struct ResidualConvStage {
  Tensor<S> w1, b1, w2, b2, ws, bs;
  Tensor<S> gn1_g, gn1_b, gn2_g, gn2_b;
  int groups = 1;

  ResidualConvStage() = default;
  ResidualConvStage(int cin, int cout, Rng& rng) : groups(norm_groups(cout)) {
    w1 = Tensor<S>::uniform_init({cout, cin, 3, 3}, cin * 9, rng);
    b1 = Tensor<S>({cout}, true);
    w2 = Tensor<S>::uniform_init({cout, cout, 3, 3}, cout * 9, rng);
    b2 = Tensor<S>({cout}, true);
    ws = Tensor<S>::uniform_init({cout, cin, 1, 1}, cin, rng);
    bs = Tensor<S>({cout}, true);
    gn1_g = Tensor<S>::full({cout}, S(1));
    gn1_g.set_requires_grad(true);
    gn1_b = Tensor<S>({cout}, true);
    gn2_g = Tensor<S>::full({cout}, S(1));
    gn2_g.set_requires_grad(true);
    gn2_b = Tensor<S>({cout}, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    Tensor<S> h = relu(group_norm(conv2d(x, w1, b1, /*stride=*/2, /*pad=*/1), groups, gn1_g, gn1_b));
    h = group_norm(conv2d(h, w2, b2, 1, 1), groups, gn2_g, gn2_b);
    Tensor<S> skip = conv2d(x, ws, bs, 2, 0);
    return relu(add(h, skip));
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    add_param(out, prefix + ".w1", w1);
    add_param(out, prefix + ".b1", b1);
    add_param(out, prefix + ".w2", w2);
    add_param(out, prefix + ".b2", b2);
    add_param(out, prefix + ".ws", ws);
    add_param(out, prefix + ".bs", bs);
    add_param(out, prefix + ".gn1_g", gn1_g);
    add_param(out, prefix + ".gn1_b", gn1_b);
    add_param(out, prefix + ".gn2_g", gn2_g);
    add_param(out, prefix + ".gn2_b", gn2_b);
  }
};

// Per-frame residual conv stack; frame count is preserved, spatial extents
// shrink by 2 per stage.
template <class S>
struct ConvStack {
  std::vector<ResidualConvStage<S>> stages;
  int in_channels = 3;

  ConvStack() = default;
  ConvStack(int cin, const std::vector<int>& channels, Rng& rng) : in_channels(cin) {
    int c = cin;
    for (int cout : channels) {
      stages.emplace_back(c, cout, rng);
      c = cout;
    }
  }

  int total_stride() const { return 1 << static_cast<int>(stages.size()); }

  Tensor<S> forward(const Tensor<S>& frames) const {
    if (frames.ndim() != 4)
      throw std::invalid_argument("conv stack: expected (T,C,H,W), got " + shape_str(frames.shape()));
    const int s = total_stride();
    if (frames.dim(2) % s != 0 || frames.dim(3) % s != 0)
      throw std::invalid_argument("conv stack: spatial extents of " + shape_str(frames.shape()) +
                                  " not divisible by total stride " + std::to_string(s));
    Tensor<S> h = frames;
    for (const auto& st : stages) h = st.forward(h);
    return h;
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    for (size_t i = 0; i < stages.size(); ++i) stages[i].collect(prefix + ".s" + std::to_string(i), out);
  }
};

// Length-preserving temporal convolution over (T,C) sequences.
template <class S>
struct TemporalConv {
  Tensor<S> w, b;

  TemporalConv() = default;
  TemporalConv(int cin, int cout, int kernel, Rng& rng) {
    w = Tensor<S>::uniform_init({cout, cin, kernel}, cin * kernel, rng);
    b = Tensor<S>({cout}, true);
  }

  Tensor<S> forward(const Tensor<S>& x) const { return conv1d_same(x, w, b); }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    add_param(out, prefix + ".w", w);
    add_param(out, prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// embeddings
// ---------------------------------------------------------------------------

template <class S>
struct Embedding {
  Tensor<S> table;  // (V, D)

  Embedding() = default;
  Embedding(int vocab, int dim, Rng& rng) { table = Tensor<S>::uniform_init({vocab, dim}, dim, rng); }

  Tensor<S> forward(const std::vector<int>& ids) const { return embedding_lookup(table, ids); }

  void collect(const std::string& prefix, ParamList<S>& out) const { add_param(out, prefix + ".table", table); }
};

// standard sinusoidal position table, constant (not learned)
template <class S>
Tensor<S> sinusoidal_positions(int len, int dim) {
  Tensor<S> pe({len, dim});
  for (int p = 0; p < len; ++p)
    for (int i = 0; i < dim; ++i) {
      const double angle = p / std::pow(10000.0, 2.0 * (i / 2) / dim);
      pe.at({p, i}) = static_cast<S>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

template <class S>
Tensor<S> add_positional(const Tensor<S>& x) {
  return add(x, sinusoidal_positions<S>(x.dim(0), x.dim(1)));
}

// sinusoidal features of a scalar timestep, used by the denoiser
template <class S>
Tensor<S> timestep_embedding(int t, int dim) {
  Tensor<S> e({dim});
  for (int i = 0; i < dim; ++i) {
    const double angle = t / std::pow(10000.0, 2.0 * (i / 2) / dim);
    e.at({i}) = static_cast<S>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
  }
  return e;
}

}  // namespace unicue
