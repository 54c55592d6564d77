#pragma once

#include "unicue/layers.hpp"

// VisioPhonetic Adapter: MLP -> cross-attention with learnable queries ->
// residual MLP. The queries attend over the MLP-refined visual tokens; the
// attention summary (mean over queries) is broadcast-added back onto every
// position, so the output length always matches the input.

namespace unicue {

template <class S>
struct Vpa {
  int dim = 64;
  int query_count = 8;
  Mlp<S> mlp1, mlp2;
  Tensor<S> queries;           // (Q,D), learnable
  Linear<S> wq, wk, wv;        // pure projection matrices

  Vpa() = default;
  // Only the second MLP's output layer starts at zero. That already makes
  // the adapter output zero at init; zeroing the first MLP's output too
  // would pin its hidden pre-activations at exactly 0, where relu passes
  // no gradient, leaving the whole adapter untrainable.
  Vpa(int d, int q, Rng& rng)
      : dim(d),
        query_count(q),
        mlp1(d, 2 * d, d, rng, /*zero_init_out=*/false),
        mlp2(d, 2 * d, d, rng, /*zero_init_out=*/true),
        wq(d, d, rng, false),
        wk(d, d, rng, false),
        wv(d, d, rng, false) {
    queries = Tensor<S>({q, d}, true);  // rescaled at stage-2 start
  }

  void init_queries(double stddev, Rng& rng) {
    for (auto& v : queries.values()) v = static_cast<S>(rng.normal() * stddev);
  }

  Tensor<S> forward(const Tensor<S>& zmv) const {
    if (zmv.ndim() != 2 || zmv.dim(1) != dim)
      throw std::invalid_argument("vpa: expected (L," + std::to_string(dim) + "), got " + shape_str(zmv.shape()));
    Tensor<S> h = mlp1.forward(zmv);                           // (L,D)
    Tensor<S> q = wq.forward(queries);                         // (Q,D)
    Tensor<S> k = wk.forward(h);                               // (L,D)
    Tensor<S> v = wv.forward(h);                               // (L,D)
    const S inv_sqrt_d = S(1) / std::sqrt(static_cast<S>(dim));
    Tensor<S> attn = matmul(softmax(scale(matmul_nt(q, k), inv_sqrt_d), 1), v);  // (Q,D)
    Tensor<S> summary = mean_axis0(attn);                      // (D), broadcast over L
    return mlp2.forward(add(h, summary));                      // (L,D)
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    mlp1.collect(prefix + ".mlp1", out);
    mlp2.collect(prefix + ".mlp2", out);
    add_param(out, prefix + ".queries", queries);
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
  }
};

}  // namespace unicue
