#pragma once

#include "unicue/layers.hpp"

// Pose-aware visual processor: one shared encoder applied to the video and
// pose streams, then channel-wise concat + MLP fusion into the mixed visual
// embedding (one token per frame).

namespace unicue {

struct VisualConfig {
  int height = 32;
  int width = 32;
  std::vector<int> conv_channels = {16, 32};
  int dim = 64;
  int heads = 4;
  int encoder_depth = 2;
};

template <class S>
struct VisualProcessor {
  VisualConfig cfg;
  ConvStack<S> conv;
  TemporalConv<S> tconv;
  LayerNorm<S> stem_ln;  // pooled conv features are tiny; normalize before
                         // the position code is added or position drowns content
  TransformerEncoder<S> encoder;
  Mlp<S> fusion;  // 2D -> 2D -> D

  VisualProcessor() = default;
  VisualProcessor(const VisualConfig& c, Rng& rng)
      : cfg(c),
        conv(5, c.conv_channels, rng),
        tconv(c.conv_channels.back(), c.dim, 3, rng),
        stem_ln(c.dim),
        encoder(AttentionConfig{c.dim, c.heads}, c.encoder_depth, rng),
        fusion(2 * c.dim, 2 * c.dim, c.dim, rng) {}

  // normalized coordinate planes appended to every frame: where a cue sits
  // on the canvas must survive the spatial average pooling below, since the
  // hand position carries the vowel
  Tensor<S> with_coordinates(const Tensor<S>& frames) const {
    const int t = frames.dim(0), h = frames.dim(2), w = frames.dim(3);
    Tensor<S> coords({t, 2, h, w});
    for (int f = 0; f < t; ++f)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          coords.at({f, 0, y, x}) = static_cast<S>(y) / (h - 1) - S(0.5);
          coords.at({f, 1, y, x}) = static_cast<S>(x) / (w - 1) - S(0.5);
        }
    return concat_channels(frames, coords);
  }

  // (T,3,H,W) -> (T,D); the same parameters serve both streams
  Tensor<S> encode_stream(const Tensor<S>& frames) const {
    if (frames.ndim() != 4 || frames.dim(1) != 3 || frames.dim(2) != cfg.height || frames.dim(3) != cfg.width)
      throw std::invalid_argument("encode_stream: expected (T,3," + std::to_string(cfg.height) + "," +
                                  std::to_string(cfg.width) + "), got " + shape_str(frames.shape()));
    Tensor<S> h = conv.forward(with_coordinates(frames));  // (T,C,H',W')
    h = spatial_mean(h);                                   // (T,C)
    // temporal mean normalization: the pooled features are dominated by a
    // frame-independent background response that buries the cue content;
    // centering over time removes it exactly
    h = center_rows(h);
    h = stem_ln.forward(tconv.forward(h));                 // (T,D)
    h = add_positional(h);
    return encoder.forward(h);                             // (T,D)
  }

  // channel-wise concat then MLP projection back to D
  Tensor<S> fuse(const Tensor<S>& zv, const Tensor<S>& zp) const {
    if (zv.dim(0) != zp.dim(0) || zv.dim(1) != zp.dim(1))
      throw std::invalid_argument("fuse: stream shapes disagree, " + shape_str(zv.shape()) + " vs " +
                                  shape_str(zp.shape()));
    return fusion.forward(concat_cols(zv, zp));
  }

  Tensor<S> mixed_embedding(const Tensor<S>& video, const Tensor<S>& pose) const {
    return fuse(encode_stream(video), encode_stream(pose));
  }

  void collect(const std::string& prefix, ParamList<S>& out) const {
    conv.collect(prefix + ".conv", out);
    tconv.collect(prefix + ".tconv", out);
    stem_ln.collect(prefix + ".stem_ln", out);
    encoder.collect(prefix + ".enc", out);
    fusion.collect(prefix + ".fusion", out);
  }
};

}  // namespace unicue
