#pragma once

#include "unicue/layers.hpp"

// CSV2S generation path: a small convolutional VAE compressing mels 4x per
// axis, the blend-parameterized forward noising z_t = a_t*z + (1-a_t)*eps,
// its exact algebraic inverse, a conditional U-shaped denoiser with
// cross-attention at the bottleneck, and the deterministic re-blend sampler.

namespace unicue {

// ---------------------------------------------------------------------------
// noise schedule
// ---------------------------------------------------------------------------

struct NoiseSchedule {
  std::vector<double> alphas;  // alphas[t-1] for t in [1, steps]

  int steps() const { return static_cast<int>(alphas.size()); }

  double alpha(int t) const {
    if (t < 1 || t > steps())
      throw std::invalid_argument("schedule step " + std::to_string(t) + " outside [1," + std::to_string(steps()) + "]");
    return alphas[static_cast<size_t>(t - 1)];
  }

  static NoiseSchedule linear(int steps = 50, double alpha_first = 0.98, double alpha_min = 0.02) {
    if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
    NoiseSchedule s;
    s.alphas.resize(static_cast<size_t>(steps));
    for (int t = 1; t <= steps; ++t)
      s.alphas[static_cast<size_t>(t - 1)] =
          steps == 1 ? alpha_min : alpha_first + (alpha_min - alpha_first) * (t - 1) / (steps - 1);
    s.validate();
    return s;
  }

  void validate() const {
    if (alphas.empty()) throw std::invalid_argument("empty noise schedule");
    for (size_t i = 0; i < alphas.size(); ++i) {
      if (!(alphas[i] > 0.0 && alphas[i] <= 1.0))
        throw std::invalid_argument("alpha_" + std::to_string(i + 1) + " outside (0,1]");
      if (i > 0 && !(alphas[i] < alphas[i - 1]))
        throw std::invalid_argument("alphas must decrease strictly");
    }
  }
};

// the division in the inversion becomes ill-conditioned below this
inline constexpr double kAlphaFloor = 1e-3;

// z_t = a_t * z_s + (1 - a_t) * eps, the linear blend written in the source
// parameterization (not the variance-preserving sqrt form)
template <class S>
Tensor<S> noise_forward(const Tensor<S>& zs, const Tensor<S>& eps, int t, const NoiseSchedule& sched) {
  if (zs.shape() != eps.shape())
    throw std::invalid_argument("noise_forward: shape mismatch " + shape_str(zs.shape()) + " vs " +
                                shape_str(eps.shape()));
  const S a = static_cast<S>(sched.alpha(t));
  return add(scale(zs, a), scale(eps, S(1) - a));
}

// z_hat = (z_t - (1 - a_t) * eps_hat) / a_t, the exact inverse of the blend
template <class S>
Tensor<S> latent_estimate(const Tensor<S>& zt, const Tensor<S>& eps_hat, int t, const NoiseSchedule& sched) {
  if (zt.shape() != eps_hat.shape())
    throw std::invalid_argument("latent_estimate: shape mismatch " + shape_str(zt.shape()) + " vs " +
                                shape_str(eps_hat.shape()));
  const double a = sched.alpha(t);
  if (a < kAlphaFloor)
    throw std::invalid_argument("latent_estimate: alpha_" + std::to_string(t) + " = " + std::to_string(a) +
                                " below the conditioning floor " + std::to_string(kAlphaFloor));
  return scale(sub(zt, scale(eps_hat, S(1) - static_cast<S>(a))), S(1.0 / a));
}

// ---------------------------------------------------------------------------
// VAE
// ---------------------------------------------------------------------------

struct VaeConfig {
  int channels1 = 16;
  int channels2 = 32;
  int latent_channels = 4;
  float kl_weight = 1e-3f;
};

template <class S>
struct Vae {
  VaeConfig cfg;
  Tensor<S> enc_w1, enc_b1, enc_w2, enc_b2, mu_w, mu_b, lv_w, lv_b;
  Tensor<S> dec_w1, dec_b1, dec_w2, dec_b2, dec_w3, dec_b3;

  Vae() = default;
  Vae(const VaeConfig& c, Rng& rng) : cfg(c) {
    const int c1 = c.channels1, c2 = c.channels2, cl = c.latent_channels;
    enc_w1 = Tensor<S>::uniform_init({c1, 1, 3, 3}, 9, rng);
    enc_b1 = Tensor<S>({c1}, true);
    enc_w2 = Tensor<S>::uniform_init({c2, c1, 3, 3}, c1 * 9, rng);
    enc_b2 = Tensor<S>({c2}, true);
    mu_w = Tensor<S>::uniform_init({cl, c2, 3, 3}, c2 * 9, rng);
    mu_b = Tensor<S>({cl}, true);
    lv_w = Tensor<S>::uniform_init({cl, c2, 3, 3}, c2 * 9, rng);
    lv_b = Tensor<S>({cl}, true);
    dec_w1 = Tensor<S>::uniform_init({c2, cl, 3, 3}, cl * 9, rng);
    dec_b1 = Tensor<S>({c2}, true);
    dec_w2 = Tensor<S>::uniform_init({c1, c2, 3, 3}, c2 * 9, rng);
    dec_b2 = Tensor<S>({c1}, true);
    dec_w3 = Tensor<S>::uniform_init({1, c1, 3, 3}, c1 * 9, rng);
    dec_b3 = Tensor<S>({1}, true);
  }

  static void check_mel(const Tensor<S>& mel) {
    if (mel.ndim() != 2) throw std::invalid_argument("vae: expected a 2-D mel, got " + shape_str(mel.shape()));
    if (mel.dim(0) % 4 != 0 || mel.dim(1) % 4 != 0)
      throw std::invalid_argument("vae: mel extents " + shape_str(mel.shape()) + " must be divisible by 4");
  }

  struct Moments {
    Tensor<S> mu, logvar;  // (1,C,F/4,M/4)
  };

  Moments encode_moments(const Tensor<S>& mel) const {
    check_mel(mel);
    Tensor<S> x = reshape(mel, {1, 1, mel.dim(0), mel.dim(1)});
    Tensor<S> h = relu(conv2d(x, enc_w1, enc_b1, 2, 1));
    h = relu(conv2d(h, enc_w2, enc_b2, 2, 1));
    return {conv2d(h, mu_w, mu_b, 1, 1), conv2d(h, lv_w, lv_b, 1, 1)};
  }

  // deterministic latent code: the posterior mean
  Tensor<S> encode(const Tensor<S>& mel) const { return encode_moments(mel).mu; }

  Tensor<S> decode(const Tensor<S>& z) const {
    if (z.ndim() != 4 || z.dim(1) != cfg.latent_channels)
      throw std::invalid_argument("vae: latent must be (1," + std::to_string(cfg.latent_channels) + ",F/4,M/4), got " +
                                  shape_str(z.shape()));
    Tensor<S> h = relu(conv2d(z, dec_w1, dec_b1, 1, 1));
    h = upsample2x(h);
    h = relu(conv2d(h, dec_w2, dec_b2, 1, 1));
    h = upsample2x(h);
    h = conv2d(h, dec_w3, dec_b3, 1, 1);
    return reshape(h, {h.dim(2), h.dim(3)});
  }

  // reparameterized training objective: recon MSE + beta * KL
  Tensor<S> elbo_loss(const Tensor<S>& mel, Rng& rng) const {
    Moments m = encode_moments(mel);
    Tensor<S> eps(m.mu.shape());
    for (auto& v : eps.values()) v = static_cast<S>(rng.normal());
    Tensor<S> z = add(m.mu, mul(exp_elem(scale(m.logvar, S(0.5))), eps));
    Tensor<S> recon = decode(z);
    return add(mse(recon, mel), scale(kl_std_normal(m.mu, m.logvar), static_cast<S>(cfg.kl_weight)));
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    add_param(out, prefix + ".enc_w1", enc_w1);
    add_param(out, prefix + ".enc_b1", enc_b1);
    add_param(out, prefix + ".enc_w2", enc_w2);
    add_param(out, prefix + ".enc_b2", enc_b2);
    add_param(out, prefix + ".mu_w", mu_w);
    add_param(out, prefix + ".mu_b", mu_b);
    add_param(out, prefix + ".lv_w", lv_w);
    add_param(out, prefix + ".lv_b", lv_b);
    add_param(out, prefix + ".dec_w1", dec_w1);
    add_param(out, prefix + ".dec_b1", dec_b1);
    add_param(out, prefix + ".dec_w2", dec_w2);
    add_param(out, prefix + ".dec_b2", dec_b2);
    add_param(out, prefix + ".dec_w3", dec_w3);
    add_param(out, prefix + ".dec_b3", dec_b3);
  }
};

// ---------------------------------------------------------------------------
// conditional denoiser
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  int latent_channels = 4;
  int channels = 32;
  int heads = 4;
  int temb_dim = 32;
  int cond_dim = 64;
};

// U-shaped conv net over the latent grid. The timestep enters as a learned
// channel bias, the conditioning sequence via cross-attention from the
// bottleneck tokens. Coordinate channels give the grid absolute positions
// so conditioning can align syllables in time.
template <class S>
struct Denoiser {
  DenoiserConfig cfg;
  Tensor<S> in_w, in_b;      // (C, cl+2, 3,3)
  Tensor<S> down_w, down_b;  // stride 2
  Linear<S> temb1;
  Linear<S> temb_gain1, temb_bias1;  // FiLM at the input stage
  Linear<S> temb_gain2, temb_bias2;  // FiLM at the bottleneck
  LayerNorm<S> attn_ln;
  MultiHeadAttention<S> attn;
  Linear<S> cond_proj;
  Tensor<S> mid_w, mid_b;
  Tensor<S> up_w, up_b;      // after skip concat: 2C -> C
  Tensor<S> out_w, out_b;    // zero-initialized: the prior predicts eps = 0

  Denoiser() = default;
  Denoiser(const DenoiserConfig& c, Rng& rng) : cfg(c) {
    const int cl = c.latent_channels, ch = c.channels;
    in_w = Tensor<S>::uniform_init({ch, cl + 2, 3, 3}, (cl + 2) * 9, rng);
    in_b = Tensor<S>({ch}, true);
    down_w = Tensor<S>::uniform_init({ch, ch, 3, 3}, ch * 9, rng);
    down_b = Tensor<S>({ch}, true);
    temb1 = Linear<S>(c.temb_dim, ch, rng);
    // channel-wise scale and shift per timestep: the eps target carries a
    // 1/(1-alpha_t) gain that additive conditioning alone cannot express
    temb_gain1 = Linear<S>(ch, ch, rng);
    temb_bias1 = Linear<S>(ch, ch, rng);
    temb_gain2 = Linear<S>(ch, ch, rng);
    temb_bias2 = Linear<S>(ch, ch, rng);
    attn_ln = LayerNorm<S>(ch);
    // the adapter output starts at zero (its output layers do), so the
    // conditioning injection must start live: a random out-projection and a
    // nonzero cond bias, or no value and no gradient ever reaches the
    // adapter through this attention
    attn = MultiHeadAttention<S>(AttentionConfig{ch, c.heads}, rng, /*zero_init_out=*/false);
    cond_proj = Linear<S>(c.cond_dim, ch, rng);
    cond_proj.b = Tensor<S>::uniform_init({ch}, c.cond_dim, rng);
    mid_w = Tensor<S>::uniform_init({ch, ch, 3, 3}, ch * 9, rng);
    mid_b = Tensor<S>({ch}, true);
    up_w = Tensor<S>::uniform_init({ch, 2 * ch, 3, 3}, 2 * ch * 9, rng);
    up_b = Tensor<S>({ch}, true);
    out_w = Tensor<S>({cl, ch, 3, 3}, true);
    out_b = Tensor<S>({cl}, true);
  }

  // normalized (row, col) coordinate planes for a (1,*,h,w) grid
  static Tensor<S> coordinate_planes(int h, int w) {
    Tensor<S> c({1, 2, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        c.at({0, 0, y, x}) = h > 1 ? static_cast<S>(y) / (h - 1) - S(0.5) : S(0);
        c.at({0, 1, y, x}) = w > 1 ? static_cast<S>(x) / (w - 1) - S(0.5) : S(0);
      }
    return c;
  }

  // zt (1,cl,h,w), cond (L,cond_dim), t in [1, steps]
  Tensor<S> forward(const Tensor<S>& zt, const Tensor<S>& cond, int t) const {
    if (zt.ndim() != 4 || zt.dim(0) != 1 || zt.dim(1) != cfg.latent_channels)
      throw std::invalid_argument("denoiser: latent must be (1," + std::to_string(cfg.latent_channels) +
                                  ",h,w), got " + shape_str(zt.shape()));
    if (cond.ndim() != 2 || cond.dim(1) != cfg.cond_dim)
      throw std::invalid_argument("denoiser: conditioning must be (L," + std::to_string(cfg.cond_dim) + "), got " +
                                  shape_str(cond.shape()));
    const int h = zt.dim(2), w = zt.dim(3);
    if (h % 2 != 0 || w % 2 != 0)
      throw std::invalid_argument("denoiser: latent grid " + shape_str(zt.shape()) + " must have even extents");

    Tensor<S> temb = reshape(timestep_embedding<S>(t, cfg.temb_dim), {1, cfg.temb_dim});
    Tensor<S> th = relu(temb1.forward(temb));
    Tensor<S> gain1 = reshape(add_const(temb_gain1.forward(th), S(1)), {cfg.channels});
    Tensor<S> bias1 = reshape(temb_bias1.forward(th), {cfg.channels});
    Tensor<S> gain2 = reshape(add_const(temb_gain2.forward(th), S(1)), {cfg.channels});
    Tensor<S> bias2 = reshape(temb_bias2.forward(th), {cfg.channels});

    Tensor<S> x = concat_channels(zt, coordinate_planes(h, w));
    Tensor<S> h1 = relu(add_channel_bias(mul_channel_gain(conv2d(x, in_w, in_b, 1, 1), gain1), bias1));
    Tensor<S> h2 = relu(conv2d(h1, down_w, down_b, 2, 1));  // (1,C,h/2,w/2)

    Tensor<S> tok = chw_to_tokens(h2);
    tok = add(tok, attn.forward(attn_ln.forward(tok), cond_proj.forward(cond)));
    Tensor<S> h2b = add_channel_bias(mul_channel_gain(tokens_to_chw(tok, cfg.channels, h / 2, w / 2), gain2), bias2);

    Tensor<S> h3 = relu(conv2d(h2b, mid_w, mid_b, 1, 1));
    Tensor<S> u = concat_channels(upsample2x(h3), h1);
    u = relu(conv2d(u, up_w, up_b, 1, 1));
    return conv2d(u, out_w, out_b, 1, 1);
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    add_param(out, prefix + ".in_w", in_w);
    add_param(out, prefix + ".in_b", in_b);
    add_param(out, prefix + ".down_w", down_w);
    add_param(out, prefix + ".down_b", down_b);
    temb1.collect(prefix + ".temb1", out);
    temb_gain1.collect(prefix + ".tg1", out);
    temb_bias1.collect(prefix + ".tb1", out);
    temb_gain2.collect(prefix + ".tg2", out);
    temb_bias2.collect(prefix + ".tb2", out);
    attn_ln.collect(prefix + ".attn_ln", out);
    attn.collect(prefix + ".attn", out);
    cond_proj.collect(prefix + ".cond", out);
    add_param(out, prefix + ".mid_w", mid_w);
    add_param(out, prefix + ".mid_b", mid_b);
    add_param(out, prefix + ".up_w", up_w);
    add_param(out, prefix + ".up_b", up_b);
    add_param(out, prefix + ".out_w", out_w);
    add_param(out, prefix + ".out_b", out_b);
  }
};

// eps-prediction objective at a uniformly drawn step
template <class S>
Tensor<S> ldm_loss(const Denoiser<S>& model, const Tensor<S>& zs, const Tensor<S>& cond, const NoiseSchedule& sched,
                   Rng& rng) {
  const int t = 1 + static_cast<int>(rng.randint(static_cast<uint64_t>(sched.steps())));
  Tensor<S> eps(zs.shape());
  for (auto& v : eps.values()) v = static_cast<S>(rng.normal());
  Tensor<S> zt = noise_forward(detach(zs), eps, t, sched);
  Tensor<S> eps_hat = model.forward(zt, cond, t);
  return mse(eps_hat, eps);
}

// Deterministic re-blend sampler built from the two schedule equations:
// estimate the clean latent, then re-noise it to the previous step reusing
// the predicted eps. Separated from the Gaussian draw for testability.
template <class S, class Model>
Tensor<S> sample_latent_from(const Model& model, Tensor<S> z, const Tensor<S>& cond,
                             const NoiseSchedule& sched) {
  NoTapeScope<S> no_tape;
  for (int t = sched.steps(); t >= 1; --t) {
    Tensor<S> eps_hat = model.forward(z, cond, t);
    Tensor<S> z0 = latent_estimate(z, eps_hat, t, sched);
    z = (t > 1) ? noise_forward(z0, eps_hat, t - 1, sched) : z0;
  }
  return z;
}

template <class S>
Tensor<S> sample_latent(const Denoiser<S>& model, const Tensor<S>& cond, const Shape& latent_shape,
                        const NoiseSchedule& sched, uint64_t seed) {
  Rng rng(seed);
  Tensor<S> z(latent_shape);
  for (auto& v : z.values()) v = static_cast<S>(rng.normal());
  return sample_latent_from(model, std::move(z), cond, sched);
}

}  // namespace unicue
