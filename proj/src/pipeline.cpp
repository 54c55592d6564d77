#include "unicue/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <sstream>

namespace unicue {

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

Tensor<float> zero_frames_like(const Tensor<float>& frames) { return Tensor<float>(frames.shape()); }

std::vector<int> wrapped_transcript(const std::vector<int>& tokens) {
  std::vector<int> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(kBosId);
  ids.insert(ids.end(), tokens.begin(), tokens.end());
  ids.push_back(kEosId);
  return ids;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  const size_t n = xs.size();
  if (n < 2) return 0.0;
  double mx = 0, my = 0;
  for (size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

Model::Model(const ModelDims& d, uint64_t seed, int frame_height, int frame_width) : dims(d) {
  Rng root(seed);
  Rng r_visual = root.fork(1);
  Rng r_text = root.fork(2);
  Rng r_dec = root.fork(3);
  Rng r_vpa = root.fork(4);
  Rng r_vae = root.fork(5);
  Rng r_den = root.fork(6);

  VisualConfig vc;
  vc.height = frame_height;
  vc.width = frame_width;
  vc.conv_channels = d.conv_channels;
  vc.dim = d.dim;
  vc.heads = d.heads;
  vc.encoder_depth = d.encoder_depth;
  visual = VisualProcessor<float>(vc, r_visual);

  const AttentionConfig ac{d.dim, d.heads};
  text = TextEncoder<float>(kVocabSize, ac, d.encoder_depth, r_text);
  decoder = CsrDecoder<float>(kVocabSize, ac, d.decoder_depth, r_dec);
  vpa = Vpa<float>(d.dim, d.vpa_queries, r_vpa);

  VaeConfig vcfg;
  vcfg.channels1 = d.vae_channels1;
  vcfg.channels2 = d.vae_channels2;
  vcfg.latent_channels = d.latent_channels;
  vcfg.kl_weight = d.kl_weight;
  vae = Vae<float>(vcfg, r_vae);

  DenoiserConfig dc;
  dc.latent_channels = d.latent_channels;
  dc.channels = d.denoiser_channels;
  dc.heads = d.denoiser_heads;
  dc.temb_dim = d.temb_dim;
  dc.cond_dim = d.dim;
  denoiser = Denoiser<float>(dc, r_den);

  sched = NoiseSchedule::linear(d.diffusion_steps, d.alpha_first, d.alpha_min);
}

ParamList<float> Model::visual_params() const {
  ParamList<float> p;
  visual.collect("visual", p);
  return p;
}
ParamList<float> Model::text_params() const {
  ParamList<float> p;
  text.collect("text", p);
  return p;
}
ParamList<float> Model::decoder_params() const {
  ParamList<float> p;
  decoder.collect("dec", p);
  return p;
}
ParamList<float> Model::vpa_params() const {
  ParamList<float> p;
  vpa.collect("vpa", p);
  return p;
}
ParamList<float> Model::vae_params() const {
  ParamList<float> p;
  vae.collect("vae", p);
  return p;
}
ParamList<float> Model::denoiser_params() const {
  ParamList<float> p;
  denoiser.collect("den", p);
  return p;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void Adam::step(const ParamList<float>& params) {
  ++t;
  const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(t));
  const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(t));
  for (const auto& p : params) {
    Tensor<float> tensor = p.tensor;
    const size_t n = tensor.numel();
    auto& mm = m[p.name];
    auto& vv = v[p.name];
    if (mm.size() != n) mm.assign(n, 0.0f);
    if (vv.size() != n) vv.assign(n, 0.0f);
    float* w = tensor.data();
    const float* g = tensor.grad();
    for (size_t i = 0; i < n; ++i) {
      mm[i] = beta1 * mm[i] + (1.0f - beta1) * g[i];
      vv[i] = beta2 * vv[i] + (1.0f - beta2) * g[i] * g[i];
      const float mhat = mm[i] / bc1;
      const float vhat = vv[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

int corpus_max_tokens(const Corpus& corpus) {
  int mx = 0;
  for (const auto& s : corpus.samples) mx = std::max(mx, static_cast<int>(s.tokens.size()));
  return mx;
}

// pad with silence columns up to a fixed training width
Tensor<float> padded_mel(const Sample& sample, int pad_cols) {
  const int f = sample.mel.dim(0);
  const int m = sample.mel.dim(1);
  if (m > pad_cols)
    throw std::invalid_argument("sample mel has " + std::to_string(m) + " columns, exceeding the padded width " +
                                std::to_string(pad_cols));
  Tensor<float> out({f, pad_cols});
  for (int r = 0; r < f; ++r)
    std::copy(sample.mel.data() + static_cast<size_t>(r) * m, sample.mel.data() + static_cast<size_t>(r + 1) * m,
              out.data() + static_cast<size_t>(r) * pad_cols);
  return out;
}

ParamList<float> stage_params(const Model& model, const TrainConfig& cfg) {
  ParamList<float> params;
  switch (cfg.stage) {
    case 0:
      params = model.vae_params();
      break;
    case 1: {
      params = model.visual_params();
      for (auto& p : model.decoder_params()) params.push_back(p);
      if (cfg.use_align_loss)
        for (auto& p : model.text_params()) params.push_back(p);
      break;
    }
    case 2: {
      params = model.vpa_params();
      for (auto& p : model.denoiser_params()) params.push_back(p);
      if (!cfg.freeze_visual)
        for (auto& p : model.visual_params()) params.push_back(p);
      break;
    }
    default:
      throw std::invalid_argument("unknown stage " + std::to_string(cfg.stage));
  }
  return params;
}

Checkpoint snapshot(const Model& model, const TrainConfig& cfg, const Adam& adam, const Rng& rng, uint64_t step) {
  Checkpoint ckpt;
  ckpt.config_text = config_to_text(cfg);
  ckpt.step = step;
  ckpt.rng_state = rng.state();
  ckpt.adam_step = adam.t;
  store_params(ckpt, stage_params(model, cfg));
  if (cfg.stage == 2) {
    ckpt.params["meta.latent_scale"] = Blob{{1}, {model.latent_scale}};
    ckpt.params["meta.mel_pad_cols"] = Blob{{1}, {static_cast<float>(model.mel_pad_cols)}};
  }
  if (cfg.stage == 0) ckpt.params["meta.mel_pad_cols"] = Blob{{1}, {static_cast<float>(model.mel_pad_cols)}};
  for (const auto& [name, moment] : adam.m) ckpt.adam_m[name] = Blob{{static_cast<int>(moment.size())}, moment};
  for (const auto& [name, moment] : adam.v) ckpt.adam_v[name] = Blob{{static_cast<int>(moment.size())}, moment};
  return ckpt;
}

void restore_into(Model& model, const Checkpoint& ckpt) {
  ParamList<float> known;
  for (const auto& prefix_params :
       {model.visual_params(), model.text_params(), model.decoder_params(), model.vpa_params(), model.vae_params(),
        model.denoiser_params()})
    for (const auto& p : prefix_params) known.push_back(p);

  ParamList<float> wanted;
  std::map<std::string, const ParamRef<float>*> by_name;
  for (const auto& p : known) by_name[p.name] = &p;
  for (const auto& [name, blob] : ckpt.params) {
    if (name.rfind("meta.", 0) == 0) continue;
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint parameter '" + name + "' is unknown to this model");
    wanted.push_back(*it->second);
  }
  load_params(ckpt, wanted);
  if (const auto it = ckpt.params.find("meta.latent_scale"); it != ckpt.params.end())
    model.latent_scale = it->second.data.at(0);
  if (const auto it = ckpt.params.find("meta.mel_pad_cols"); it != ckpt.params.end())
    model.mel_pad_cols = static_cast<int>(it->second.data.at(0));
}

void restore_adam(Adam& adam, const Checkpoint& ckpt) {
  adam.t = ckpt.adam_step;
  adam.m.clear();
  adam.v.clear();
  for (const auto& [name, blob] : ckpt.adam_m) adam.m[name] = blob.data;
  for (const auto& [name, blob] : ckpt.adam_v) adam.v[name] = blob.data;
}

namespace {

void check_finite_loss(float loss, int stage, uint64_t step, const std::string& detail) {
  if (!std::isfinite(loss))
    throw std::runtime_error("stage " + std::to_string(stage) + ": non-finite loss at step " + std::to_string(step) +
                             " (" + detail + "); aborting with diagnostic dump");
}

}  // namespace

// ---------------------------------------------------------------------------
// stage 0: VAE pretraining
// ---------------------------------------------------------------------------

StageLog run_stage0(Model& model, const Corpus& train, const TrainConfig& cfg, Adam& adam, Rng& rng,
                    std::ostream* log, uint64_t start_step) {
  if (train.samples.empty()) throw std::invalid_argument("stage 0: empty training corpus");
  const double t0 = now_seconds();
  StageLog out;
  if (model.mel_pad_cols == 0) {
    model.mel_pad_cols =
        cfg.mel_pad_cols > 0 ? cfg.mel_pad_cols : corpus_max_tokens(train) * train.config.mel_cols_per_syllable;
  }
  std::vector<Tensor<float>> mels;
  mels.reserve(train.samples.size());
  for (const auto& s : train.samples) mels.push_back(padded_mel(s, model.mel_pad_cols));

  const ParamList<float> params = model.vae_params();
  const int n = static_cast<int>(mels.size());
  for (uint64_t step = start_step; step < static_cast<uint64_t>(cfg.steps); ++step) {
    TapeScope<float> scope;
    for (const auto& p : params) {
      Tensor<float> t = p.tensor;
      t.zero_grad();
    }
    Tensor<float> total;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int idx = static_cast<int>(rng.randint(static_cast<uint64_t>(n)));
      Tensor<float> loss = model.vae.elbo_loss(mels[static_cast<size_t>(idx)], rng);
      total = b == 0 ? loss : add(total, loss);
    }
    total = scale(total, 1.0f / static_cast<float>(cfg.batch_size));
    const float loss_val = total.item();
    check_finite_loss(loss_val, 0, step, "elbo=" + std::to_string(loss_val));
    scope.backward(total);
    {
      NoTapeScope<float> no_tape;
      adam.step(params);
    }
    out.losses.push_back(loss_val);
    out.steps_run = step + 1;
    if (log && cfg.log_every > 0 && step % static_cast<uint64_t>(cfg.log_every) == 0)
      (*log) << "stage0 step " << step << " loss " << loss_val << "\n";
    if (cfg.target_loss > 0 && loss_val <= cfg.target_loss) {
      // confirm on a recon sweep before stopping
      NoTapeScope<float> no_tape;
      double mse_sum = 0;
      for (const auto& mel : mels) {
        Tensor<float> recon = model.vae.decode(model.vae.encode(mel));
        mse_sum += mse(recon, mel).item();
      }
      const double recon = mse_sum / mels.size();
      out.metric_history.emplace_back(step, recon);
      if (recon <= cfg.target_loss) {
        out.reached_target = true;
        out.final_metric = recon;
        break;
      }
    }
  }
  if (out.final_metric < 0) {
    NoTapeScope<float> no_tape;
    double mse_sum = 0;
    for (const auto& mel : mels) mse_sum += mse(model.vae.decode(model.vae.encode(mel)), mel).item();
    out.final_metric = mse_sum / mels.size();
    out.reached_target = cfg.target_loss > 0 ? out.final_metric <= cfg.target_loss : out.reached_target;
  }
  out.seconds = now_seconds() - t0;
  if (log) (*log) << "stage0 done: recon_mse " << out.final_metric << " after " << out.steps_run << " steps\n";
  return out;
}

// ---------------------------------------------------------------------------
// stage 1: CSR + alignment
// ---------------------------------------------------------------------------

StageLog run_stage1(Model& model, const Corpus& train, const Corpus* heldout, const TrainConfig& cfg, Adam& adam,
                    Rng& rng, std::ostream* log, uint64_t start_step) {
  if (train.samples.empty()) throw std::invalid_argument("stage 1: empty training corpus");
  const double t0 = now_seconds();
  StageLog out;
  const ParamList<float> params = stage_params(model, cfg);
  const int n = static_cast<int>(train.samples.size());

  for (uint64_t step = start_step; step < static_cast<uint64_t>(cfg.steps); ++step) {
    TapeScope<float> scope;
    for (const auto& p : params) {
      Tensor<float> t = p.tensor;
      t.zero_grad();
    }
    Tensor<float> total;
    float loss_r_sum = 0, loss_s_sum = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const Sample& s = train.samples[rng.randint(static_cast<uint64_t>(n))];
      Tensor<float> pose_in = cfg.use_pose ? s.pose : zero_frames_like(s.pose);
      Tensor<float> zv = model.visual.encode_stream(s.video);
      Tensor<float> zp = model.visual.encode_stream(pose_in);
      Tensor<float> zmv = model.visual.fuse(zv, zp);
      const TeacherForced tf = teacher_forcing(s.tokens);
      Tensor<float> loss_r = csr_loss(model.decoder.decode_logits(zmv, tf.prefix), tf.targets);
      loss_r_sum += loss_r.item();
      Tensor<float> sample_loss = loss_r;
      if (cfg.use_align_loss) {
        TextEmbedding<float> zt = model.text.forward(wrapped_transcript(s.tokens));
        Tensor<float> loss_s = alignment_pool_loss(mean_axis0(zv), mean_axis0(zp), zt.pooled);
        loss_s_sum += loss_s.item();
        sample_loss = add(loss_r, loss_s);
      }
      total = b == 0 ? sample_loss : add(total, sample_loss);
    }
    total = scale(total, 1.0f / static_cast<float>(cfg.batch_size));
    const float loss_val = total.item();
    check_finite_loss(loss_val, 1, step,
                      "loss_r=" + std::to_string(loss_r_sum / cfg.batch_size) +
                          " loss_s=" + std::to_string(loss_s_sum / cfg.batch_size));
    scope.backward(total);
    {
      NoTapeScope<float> no_tape;
      adam.step(params);
    }
    out.losses.push_back(loss_val);
    out.steps_run = step + 1;
    if (log && cfg.log_every > 0 && step % static_cast<uint64_t>(cfg.log_every) == 0)
      (*log) << "stage1 step " << step << " loss " << loss_val << " loss_r " << loss_r_sum / cfg.batch_size
             << " loss_s " << loss_s_sum / cfg.batch_size << "\n";

    const bool eval_now = cfg.eval_every > 0 && (step + 1) % static_cast<uint64_t>(cfg.eval_every) == 0;
    if (eval_now) {
      if (cfg.target_token_accuracy > 0) {
        const double acc = token_accuracy(model, train, cfg.use_pose);
        out.metric_history.emplace_back(step + 1, acc);
        out.final_metric = acc;
        if (log) (*log) << "stage1 step " << step + 1 << " train_token_accuracy " << acc << "\n";
        if (acc >= cfg.target_token_accuracy) {
          out.reached_target = true;
          break;
        }
      } else if (heldout && cfg.target_wer >= 0) {
        const double w = csr_corpus_wer(model, *heldout, cfg.use_pose);
        out.metric_history.emplace_back(step + 1, w);
        out.final_metric = w;
        if (log) (*log) << "stage1 step " << step + 1 << " heldout_wer " << w << "\n";
        if (w <= cfg.target_wer) {
          out.reached_target = true;
          break;
        }
      }
    }
  }
  if (out.final_metric < 0) {
    if (cfg.target_token_accuracy > 0)
      out.final_metric = token_accuracy(model, train, cfg.use_pose);
    else if (heldout)
      out.final_metric = csr_corpus_wer(model, *heldout, cfg.use_pose);
  }
  out.seconds = now_seconds() - t0;
  if (log) (*log) << "stage1 done: metric " << out.final_metric << " after " << out.steps_run << " steps\n";
  return out;
}

// ---------------------------------------------------------------------------
// stage 2: diffusion generator
// ---------------------------------------------------------------------------

StageLog run_stage2(Model& model, const Corpus& train, const TrainConfig& cfg, Adam& adam, Rng& rng,
                    std::ostream* log, uint64_t start_step) {
  if (train.samples.empty()) throw std::invalid_argument("stage 2: empty training corpus");
  const double t0 = now_seconds();
  StageLog out;
  const int n = static_cast<int>(train.samples.size());

  if (model.mel_pad_cols == 0)
    throw std::invalid_argument("stage 2: mel padding width unset; run stage 0 first or set mel_pad_cols");

  // latent codes are fixed (the VAE is frozen): cache them once
  std::vector<Tensor<float>> latents;
  latents.reserve(train.samples.size());
  {
    NoTapeScope<float> no_tape;
    for (const auto& s : train.samples) latents.push_back(model.vae.encode(padded_mel(s, model.mel_pad_cols)));
  }
  if (start_step == 0 && cfg.resume_checkpoint.empty()) {
    // empirical latent scale over the training corpus, fixed once
    double sum = 0, sq = 0;
    size_t count = 0;
    for (const auto& z : latents)
      for (float v : z.values()) {
        sum += v;
        sq += static_cast<double>(v) * v;
        ++count;
      }
    const double mean = sum / static_cast<double>(count);
    const double var = std::max(1e-12, sq / static_cast<double>(count) - mean * mean);
    model.latent_scale = static_cast<float>(std::sqrt(var));
    // queries start as Gaussian samples matched to the normalized latent
    // scale the diffusion operates in
    Rng qrng = rng.fork(0x71);
    model.vpa.init_queries(1.0, qrng);
  }
  const float inv_scale = 1.0f / model.latent_scale;
  for (auto& z : latents) {
    NoTapeScope<float> no_tape;
    z = scale(z, inv_scale);
  }

  // frozen visual processor: the mixed embeddings are also fixed
  std::vector<Tensor<float>> cached_zmv;
  if (cfg.freeze_visual) {
    NoTapeScope<float> no_tape;
    cached_zmv.reserve(train.samples.size());
    for (const auto& s : train.samples) {
      Tensor<float> pose_in = cfg.use_pose ? s.pose : zero_frames_like(s.pose);
      cached_zmv.push_back(model.visual.mixed_embedding(s.video, pose_in));
    }
  }

  const ParamList<float> params = stage_params(model, cfg);
  for (uint64_t step = start_step; step < static_cast<uint64_t>(cfg.steps); ++step) {
    TapeScope<float> scope;
    for (const auto& p : params) {
      Tensor<float> t = p.tensor;
      t.zero_grad();
    }
    Tensor<float> total;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const size_t idx = rng.randint(static_cast<uint64_t>(n));
      const Sample& s = train.samples[idx];
      Tensor<float> zmv;
      if (cfg.freeze_visual) {
        zmv = cached_zmv[idx];
      } else {
        Tensor<float> pose_in = cfg.use_pose ? s.pose : zero_frames_like(s.pose);
        zmv = model.visual.mixed_embedding(s.video, pose_in);
      }
      Tensor<float> cond = model.vpa.forward(zmv);
      Tensor<float> loss = ldm_loss(model.denoiser, latents[idx], cond, model.sched, rng);
      total = b == 0 ? loss : add(total, loss);
    }
    total = scale(total, 1.0f / static_cast<float>(cfg.batch_size));
    const float loss_val = total.item();
    check_finite_loss(loss_val, 2, step, "ldm=" + std::to_string(loss_val));
    scope.backward(total);
    {
      NoTapeScope<float> no_tape;
      adam.step(params);
    }
    out.losses.push_back(loss_val);
    out.steps_run = step + 1;
    if (log && cfg.log_every > 0 && step % static_cast<uint64_t>(cfg.log_every) == 0)
      (*log) << "stage2 step " << step << " loss " << loss_val << "\n";
    if (cfg.target_loss > 0 && out.losses.size() >= 32) {
      double recent = 0;
      for (size_t i = out.losses.size() - 32; i < out.losses.size(); ++i) recent += out.losses[i];
      recent /= 32.0;
      if (recent <= cfg.target_loss) {
        out.reached_target = true;
        out.final_metric = recent;
        break;
      }
    }
  }
  if (out.final_metric < 0 && !out.losses.empty()) {
    double recent = 0;
    const size_t window = std::min<size_t>(32, out.losses.size());
    for (size_t i = out.losses.size() - window; i < out.losses.size(); ++i) recent += out.losses[i];
    out.final_metric = recent / static_cast<double>(window);
  }
  out.seconds = now_seconds() - t0;
  if (log) (*log) << "stage2 done: mean recent loss " << out.final_metric << " after " << out.steps_run << " steps\n";
  return out;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

double token_accuracy(const Model& model, const Corpus& corpus, bool use_pose) {
  NoTapeScope<float> no_tape;
  size_t correct = 0, total = 0;
  for (const auto& s : corpus.samples) {
    Tensor<float> pose_in = use_pose ? s.pose : zero_frames_like(s.pose);
    Tensor<float> zmv = model.visual.mixed_embedding(s.video, pose_in);
    const TeacherForced tf = teacher_forcing(s.tokens);
    Tensor<float> logits = model.decoder.decode_logits(zmv, tf.prefix);
    const int v = logits.dim(1);
    for (size_t i = 0; i < tf.targets.size(); ++i) {
      if (tf.targets[i] == kPadId) continue;
      const float* row = logits.data() + i * static_cast<size_t>(v);
      int best = 0;
      for (int j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;
      correct += best == tf.targets[i] ? 1 : 0;
      ++total;
    }
  }
  if (total == 0) throw std::invalid_argument("token_accuracy: empty corpus");
  return static_cast<double>(correct) / static_cast<double>(total);
}

double csr_corpus_wer(const Model& model, const Corpus& corpus, bool use_pose) {
  if (corpus.samples.empty()) throw std::invalid_argument("csr_corpus_wer: empty corpus");
  NoTapeScope<float> no_tape;
  const int max_len = corpus_max_tokens(corpus) + 3;
  double acc = 0;
  for (const auto& s : corpus.samples) {
    Tensor<float> pose_in = use_pose ? s.pose : zero_frames_like(s.pose);
    Tensor<float> zmv = model.visual.mixed_embedding(s.video, pose_in);
    acc += wer(s.tokens, greedy_decode(model.decoder, zmv, max_len));
  }
  return acc / static_cast<double>(corpus.samples.size());
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

InferResult infer_sample(const Model& model, const Sample& sample, const CorpusConfig& ccfg, uint64_t seed,
                         bool use_pose) {
  if (model.mel_pad_cols <= 0) throw std::invalid_argument("infer: model has no mel padding width (stage-2 missing)");
  NoTapeScope<float> no_tape;
  const double t0 = now_seconds();
  Tensor<float> pose_in = use_pose ? sample.pose : zero_frames_like(sample.pose);
  Tensor<float> zmv = model.visual.mixed_embedding(sample.video, pose_in);
  Tensor<float> cond = model.vpa.forward(zmv);
  const Shape latent_shape = {1, model.dims.latent_channels, ccfg.mel_rows / 4, model.mel_pad_cols / 4};
  Tensor<float> z = sample_latent(model.denoiser, cond, latent_shape, model.sched, seed);
  Tensor<float> mel_full = model.vae.decode(scale(z, model.latent_scale));

  // the video length fixes the syllable count; scoring ignores the padding
  const int n_tokens = sample.video.dim(0) / ccfg.frames_per_syllable;
  const int m_ref = n_tokens * ccfg.mel_cols_per_syllable;
  Tensor<float> mel({ccfg.mel_rows, m_ref});
  for (int r = 0; r < ccfg.mel_rows; ++r)
    std::copy(mel_full.data() + static_cast<size_t>(r) * model.mel_pad_cols,
              mel_full.data() + static_cast<size_t>(r) * model.mel_pad_cols + m_ref,
              mel.data() + static_cast<size_t>(r) * m_ref);

  InferResult out;
  out.tokens = decode_mel(mel, sample.cuer, ccfg);
  out.mel_full = std::move(mel_full);
  out.mel = std::move(mel);
  out.seconds = now_seconds() - t0;
  return out;
}

double estimate_spectral_tilt(const Tensor<float>& mel, const std::vector<int>& tokens, int pitch_offset,
                              const CorpusConfig& ccfg) {
  const int f = mel.dim(0);
  const int m = mel.dim(1);
  const int w = ccfg.mel_cols_per_syllable;
  if (m < static_cast<int>(tokens.size()) * w)
    throw std::invalid_argument("estimate_spectral_tilt: mel narrower than the transcript");
  double num = 0, den = 0;
  for (size_t k = 0; k < tokens.size(); ++k) {
    const std::vector<float> base = mel_template_column(tokens[k], pitch_offset, 0.0f, ccfg);
    for (int r = 0; r < f; ++r) {
      if (base[static_cast<size_t>(r)] <= 0) continue;
      double measured = 0;
      for (int c = 0; c < w; ++c) measured += mel.at({r, static_cast<int>(k) * w + c});
      measured /= w;
      const double ratio = measured / base[static_cast<size_t>(r)] - 1.0;
      const double u = static_cast<double>(r) / (f - 1) - 0.5;
      num += u * ratio;
      den += u * u;
    }
  }
  return den > 1e-9 ? num / den : 0.0;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

std::string EvalReport::to_text() const {
  std::ostringstream os;
  auto ratio = [](double v) { return std::min(1.0, std::max(0.0, v)); };
  os << "unicue-eval-report v1\n";
  os << "samples: " << samples << "\n";
  if (csr_wer >= 0) os << "csr_wer: " << ratio(csr_wer) << "\n";
  if (token_accuracy >= 0) os << "token_accuracy: " << ratio(token_accuracy) << "\n";
  if (gen_wer >= 0) os << "gen_wer: " << ratio(gen_wer) << "\n";
  if (mel_mse >= 0) os << "mel_mse: " << mel_mse << "\n";
  if (mel_variance >= 0) os << "mel_variance: " << mel_variance << "\n";
  os << "identity_correlation: " << identity_correlation << "\n";
  os << "infer_seconds_per_sample: " << infer_seconds_per_sample << "\n";
  os << "eval_seconds: " << eval_seconds << "\n";
  if (compare_gen_wer >= 0 && gen_wer >= 0) {
    os << "baseline_gen_wer: " << compare_gen_wer << "\n";
    os << "unified_vs_single: " << (ratio(gen_wer) <= compare_gen_wer ? "PASS" : "FAIL") << "\n";
  }
  os << "context_paper_wer_normal_hearing: 0.205\n";
  os << "context_paper_wer_hearing_impaired: 0.248\n";
  os << "context_note: paper-scale reference points, not desk-scale targets\n";
  os << "\n";
  os << "metric                          value\n";
  auto row = [&os](const std::string& name, double v) {
    os << name;
    for (size_t i = name.size(); i < 32; ++i) os << ' ';
    os << v << "\n";
  };
  if (csr_wer >= 0) row("csr_wer", ratio(csr_wer));
  if (token_accuracy >= 0) row("token_accuracy", ratio(token_accuracy));
  if (gen_wer >= 0) row("gen_wer", ratio(gen_wer));
  if (mel_mse >= 0) row("mel_mse", mel_mse);
  if (mel_variance >= 0) row("mel_variance", mel_variance);
  row("identity_correlation", identity_correlation);
  row("infer_seconds_per_sample", infer_seconds_per_sample);
  return os.str();
}

EvalReport EvalReport::parse(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "unicue-eval-report v1")
    throw std::runtime_error("not an eval report: bad header");
  EvalReport r;
  while (std::getline(is, line)) {
    if (line.empty()) break;  // metrics table follows
    const size_t colon = line.find(": ");
    if (colon == std::string::npos) continue;
    const std::string key = line.substr(0, colon);
    const std::string value = line.substr(colon + 2);
    if (key == "samples") r.samples = std::stoi(value);
    else if (key == "csr_wer") r.csr_wer = std::stod(value);
    else if (key == "token_accuracy") r.token_accuracy = std::stod(value);
    else if (key == "gen_wer") r.gen_wer = std::stod(value);
    else if (key == "mel_mse") r.mel_mse = std::stod(value);
    else if (key == "mel_variance") r.mel_variance = std::stod(value);
    else if (key == "identity_correlation") r.identity_correlation = std::stod(value);
    else if (key == "infer_seconds_per_sample") r.infer_seconds_per_sample = std::stod(value);
    else if (key == "eval_seconds") r.eval_seconds = std::stod(value);
    else if (key == "baseline_gen_wer") r.compare_gen_wer = std::stod(value);
  }
  return r;
}

EvalReport evaluate(const Model& model, const Corpus& test, const CorpusConfig& ccfg, const EvalOptions& opts) {
  if (test.samples.empty()) throw std::invalid_argument("evaluate: empty test corpus");
  const double t0 = now_seconds();
  EvalReport report;
  report.samples = static_cast<int>(test.samples.size());
  report.compare_gen_wer = opts.compare_gen_wer;
  report.csr_wer = csr_corpus_wer(model, test, opts.use_pose);
  report.token_accuracy = token_accuracy(model, test, opts.use_pose);

  if (opts.with_generation) {
    if (model.mel_pad_cols <= 0) throw std::invalid_argument("evaluate: generation requested without stage-2 state");
    double wer_sum = 0, mse_sum = 0, infer_seconds = 0;
    double mel_sum = 0, mel_sq = 0;
    size_t mel_count = 0;
    std::vector<double> tilt_est, tilt_true;
    Rng seed_rng(opts.seed);
    for (size_t i = 0; i < test.samples.size(); ++i) {
      const Sample& s = test.samples[i];
      const InferResult inf = infer_sample(model, s, ccfg, seed_rng.fork(i).next_u64(), opts.use_pose);
      infer_seconds += inf.seconds;
      wer_sum += wer(s.tokens, inf.tokens);
      const Tensor<float> ref = padded_mel(s, model.mel_pad_cols);
      mse_sum += mse(inf.mel_full, ref).item();
      for (float v : ref.values()) {
        mel_sum += v;
        mel_sq += static_cast<double>(v) * v;
        ++mel_count;
      }
      tilt_est.push_back(estimate_spectral_tilt(inf.mel, s.tokens, s.cuer.pitch_offset, ccfg));
      tilt_true.push_back(s.cuer.spectral_tilt);
    }
    const double n = static_cast<double>(test.samples.size());
    report.gen_wer = wer_sum / n;
    report.mel_mse = mse_sum / n;
    const double mel_mean = mel_sum / static_cast<double>(mel_count);
    report.mel_variance = mel_sq / static_cast<double>(mel_count) - mel_mean * mel_mean;
    report.identity_correlation = pearson(tilt_est, tilt_true);
    report.infer_seconds_per_sample = infer_seconds / n;
  }
  report.eval_seconds = now_seconds() - t0;
  return report;
}

}  // namespace unicue
