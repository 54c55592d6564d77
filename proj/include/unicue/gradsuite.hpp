#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "unicue/align.hpp"
#include "unicue/csr.hpp"
#include "unicue/diffusion.hpp"
#include "unicue/visual.hpp"
#include "unicue/vpa.hpp"

// Finite-difference verification of every layer and composite module in
// double precision at small shapes. Shared by the CLI and the acceptance
// suite; the per-item tolerance is 1e-4 relative error.

namespace unicue {

struct GradSuiteItem {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradSuiteResult {
  std::vector<GradSuiteItem> items;
  double seconds = 0.0;
  double worst() const {
    double w = 0;
    for (const auto& it : items) w = std::max(w, it.max_rel_err);
    return w;
  }
  bool all_within(double tol) const { return worst() <= tol; }
};

inline GradSuiteResult run_gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  GradSuiteResult result;
  auto push = [&result](const std::string& name, double err) { result.items.push_back({name, err}); };

  auto rand_t = [](Shape shape, Rng& rng, bool rg = false) {
    Tensor<double> t(std::move(shape), rg);
    for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
    return t;
  };
  auto params_to_inputs = [](const ParamList<double>& params, std::vector<Tensor<double>>& inputs) {
    for (const auto& p : params) inputs.push_back(p.tensor);
  };

  {  // primitives
    Rng rng(101);
    auto a = rand_t({3, 4}, rng, true);
    auto b = rand_t({4, 3}, rng, true);
    auto c = rand_t({3, 3}, rng, false);
    push("matmul", grad_check<double>([&]() { return sum_all(mul(matmul(a, b), c)); }, {a, b}));
    auto mix = rand_t({3, 4}, rng, false);
    push("softmax", grad_check<double>([&]() { return sum_all(mul(softmax(a, 1), mix)); }, {a}));
  }
  {
    Rng rng(102);
    auto x = rand_t({4, 6}, rng, true);
    auto g = rand_t({6}, rng, true);
    auto be = rand_t({6}, rng, true);
    auto mixer = rand_t({4, 6}, rng, false);
    push("layer_norm", grad_check<double>([&]() { return sum_all(mul(layer_norm(x, g, be), mixer)); }, {x, g, be}));
  }
  {
    Rng rng(103);
    Mlp<double> mlp(4, 8, 3, rng);
    ParamList<double> params;
    mlp.collect("mlp", params);
    auto x = rand_t({3, 4}, rng, true);
    auto target = rand_t({3, 3}, rng, false);
    std::vector<Tensor<double>> inputs = {x};
    params_to_inputs(params, inputs);
    push("mlp", grad_check<double>([&]() { return mse(mlp.forward(x), target); }, inputs));
  }
  {
    Rng rng(104);
    MultiHeadAttention<double> attn(AttentionConfig{8, 2}, rng);
    for (auto& v : attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
    ParamList<double> params;
    attn.collect("attn", params);
    auto q = rand_t({3, 8}, rng, true);
    auto kv = rand_t({4, 8}, rng, true);
    auto target = rand_t({3, 8}, rng, false);
    std::vector<Tensor<double>> inputs = {q, kv};
    params_to_inputs(params, inputs);
    push("multi_head_attention", grad_check<double>([&]() { return mse(attn.forward(q, kv), target); }, inputs));
  }
  {
    Rng rng(105);
    TransformerEncoder<double> enc(AttentionConfig{8, 2}, 2, rng);
    for (auto& blk : enc.blocks)
      for (auto& v : blk.attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
    ParamList<double> params;
    enc.collect("enc", params);
    auto x = rand_t({5, 8}, rng, true);
    auto target = rand_t({5, 8}, rng, false);
    std::vector<Tensor<double>> inputs = {x};
    params_to_inputs(params, inputs);
    push("transformer_encoder_block", grad_check<double>([&]() { return mse(enc.forward(x), target); }, inputs));
  }
  {
    Rng rng(106);
    TransformerDecoder<double> dec(AttentionConfig{8, 2}, 2, rng);
    for (auto& blk : dec.blocks) {
      for (auto& v : blk.self_attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
      for (auto& v : blk.cross_attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
    }
    ParamList<double> params;
    dec.collect("dec", params);
    auto x = rand_t({4, 8}, rng, true);
    auto mem = rand_t({3, 8}, rng, true);
    auto mask = causal_mask<double>(4);
    auto target = rand_t({4, 8}, rng, false);
    std::vector<Tensor<double>> inputs = {x, mem};
    params_to_inputs(params, inputs);
    push("transformer_decoder_block",
         grad_check<double>([&]() { return mse(dec.forward(x, mem, mask), target); }, inputs));
  }
  {
    Rng rng(107);
    ConvStack<double> stack(3, {3, 4}, rng);
    ParamList<double> params;
    stack.collect("conv", params);
    auto x = rand_t({1, 3, 8, 8}, rng, true);
    std::vector<Tensor<double>> inputs = {x};
    params_to_inputs(params, inputs);
    push("residual_conv2d_stack",
         grad_check<double>([&]() { return scale(mean_all(stack.forward(x)), 0.01); }, inputs));
  }
  {
    Rng rng(108);
    TemporalConv<double> conv(3, 4, 3, rng);
    ParamList<double> params;
    conv.collect("tconv", params);
    auto x = rand_t({5, 3}, rng, true);
    auto target = rand_t({5, 4}, rng, false);
    std::vector<Tensor<double>> inputs = {x};
    params_to_inputs(params, inputs);
    push("temporal_conv1d", grad_check<double>([&]() { return mse(conv.forward(x), target); }, inputs));
  }
  {
    Rng rng(109);
    auto a = rand_t({6}, rng, true);
    auto b = rand_t({6}, rng, true);
    push("cosine_align_loss", grad_check<double>([&]() { return cosine_align_loss(a, b); }, {a, b}, 1e-6));
    auto logits = rand_t({4, kVocabSize}, rng, true);
    const std::vector<int> targets = {3, 0, 41, kPadId};
    push("cross_entropy", grad_check<double>([&]() { return cross_entropy(logits, targets, kPadId); }, {logits}));
  }

  {  // composite: visual processor
    Rng rng(110);
    VisualConfig vc;
    vc.height = 8;
    vc.width = 8;
    vc.conv_channels = {2, 3};
    vc.dim = 8;
    vc.heads = 2;
    vc.encoder_depth = 1;
    VisualProcessor<double> vp(vc, rng);
    for (auto& blk : vp.encoder.blocks)
      for (auto& v : blk.attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
    ParamList<double> params;
    vp.collect("vp", params);
    auto video = rand_t({2, 3, 8, 8}, rng, true);
    auto pose = rand_t({2, 3, 8, 8}, rng, true);
    auto target = rand_t({2, 8}, rng, false);
    std::vector<Tensor<double>> inputs = {video, pose};
    params_to_inputs(params, inputs);
    // small loss scale keeps FD noise on negligible-gradient elements
    // below the 1e-8 floor of the relative-error formula
    push("visual_processor",
         grad_check<double>([&]() { return scale(mse(vp.mixed_embedding(video, pose), target), 0.01); }, inputs));
  }
  {  // composite: text encoder
    Rng rng(111);
    TextEncoder<double> enc(kVocabSize, AttentionConfig{8, 2}, 1, rng);
    for (auto& blk : enc.encoder.blocks)
      for (auto& v : blk.attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
    ParamList<double> params;
    enc.collect("text", params);
    auto target = rand_t({8}, rng, false);
    const std::vector<int> ids = {kBosId, 7, 21, kEosId};
    std::vector<Tensor<double>> inputs;
    params_to_inputs(params, inputs);
    push("text_encoder", grad_check<double>([&]() { return mse(enc.forward(ids).pooled, target); }, inputs));
  }
  {  // composite: text decoder head
    Rng rng(112);
    CsrDecoder<double> dec(kVocabSize, AttentionConfig{8, 2}, 1, rng);
    for (auto& blk : dec.decoder.blocks) {
      for (auto& v : blk.self_attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
      for (auto& v : blk.cross_attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
    }
    for (auto& v : dec.head.w.values()) v = rng.uniform(-0.1, 0.1);
    ParamList<double> params;
    dec.collect("dec", params);
    auto zmv = rand_t({4, 8}, rng, true);
    const std::vector<int> prefix = {kBosId, 9, 30};
    const std::vector<int> targets = {9, 30, kEosId};
    std::vector<Tensor<double>> inputs = {zmv};
    params_to_inputs(params, inputs);
    push("text_decoder", grad_check<double>([&]() { return csr_loss(dec.decode_logits(zmv, prefix), targets); }, inputs));
  }
  {  // composite: VPA
    Rng rng(112);
    Vpa<double> vpa(6, 2, rng);
    vpa.init_queries(0.5, rng);
    for (auto& v : vpa.mlp1.l2.w.values()) v = rng.uniform(-0.5, 0.5);
    for (auto& v : vpa.mlp2.l2.w.values()) v = rng.uniform(-0.5, 0.5);
    ParamList<double> params;
    vpa.collect("vpa", params);
    auto zmv = rand_t({3, 6}, rng, true);
    auto target = rand_t({3, 6}, rng, false);
    std::vector<Tensor<double>> inputs = {zmv};
    params_to_inputs(params, inputs);
    push("vpa", grad_check<double>([&]() { return scale(mse(vpa.forward(zmv), target), 0.01); }, inputs));
  }
  {  // composite: VAE
    Rng rng(114);
    VaeConfig vc;
    vc.channels1 = 2;
    vc.channels2 = 3;
    vc.latent_channels = 2;
    Vae<double> vae(vc, rng);
    ParamList<double> params;
    vae.collect("vae", params);
    Tensor<double> mel({8, 8});
    for (auto& v : mel.values()) v = rng.uniform(0.0, 1.0);
    std::vector<Tensor<double>> inputs;
    params_to_inputs(params, inputs);
    push("vae", grad_check<double>(
                    [&]() {
                      Rng fixed(5);
                      return vae.elbo_loss(mel, fixed);
                    },
                    inputs));
  }
  {  // composite: denoiser
    Rng rng(115);
    DenoiserConfig dc;
    dc.latent_channels = 2;
    dc.channels = 4;
    dc.heads = 2;
    dc.temb_dim = 4;
    dc.cond_dim = 6;
    Denoiser<double> den(dc, rng);
    for (auto& v : den.attn.wo.w.values()) v = rng.uniform(-0.3, 0.3);
    for (auto& v : den.out_w.values()) v = rng.uniform(-0.3, 0.3);
    ParamList<double> params;
    den.collect("den", params);
    auto zt = rand_t({1, 2, 4, 4}, rng, true);
    auto cond = rand_t({3, 6}, rng, true);
    auto target = rand_t({1, 2, 4, 4}, rng, false);
    std::vector<Tensor<double>> inputs = {zt, cond};
    params_to_inputs(params, inputs);
    push("denoiser",
         grad_check<double>([&]() { return scale(mse(den.forward(zt, cond, 3), target), 0.01); }, inputs));
  }

  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace unicue
