#pragma once

#include <iosfwd>
#include <optional>

#include "unicue/align.hpp"
#include "unicue/checkpoint.hpp"
#include "unicue/config.hpp"
#include "unicue/corpus.hpp"
#include "unicue/csr.hpp"
#include "unicue/diffusion.hpp"
#include "unicue/visual.hpp"
#include "unicue/vpa.hpp"

// Orchestration: stage-0 VAE pretraining, stage-1 CSR training (L_R + L_S),
// stage-2 generator training (L_G with the visual processor frozen),
// single-path inference and evaluation.

namespace unicue {

// ---------------------------------------------------------------------------
// model bundle
// ---------------------------------------------------------------------------

struct Model {
  ModelDims dims;
  VisualProcessor<float> visual;
  TextEncoder<float> text;
  CsrDecoder<float> decoder;
  Vpa<float> vpa;
  Vae<float> vae;
  Denoiser<float> denoiser;
  NoiseSchedule sched;
  float latent_scale = 1.0f;  // fixed at stage-2 start
  int mel_pad_cols = 0;       // fixed at stage-0/2 start

  Model(const ModelDims& d, uint64_t seed, int frame_height = 32, int frame_width = 32);

  ParamList<float> visual_params() const;
  ParamList<float> text_params() const;
  ParamList<float> decoder_params() const;
  ParamList<float> vpa_params() const;
  ParamList<float> vae_params() const;
  ParamList<float> denoiser_params() const;
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct Adam {
  float lr = 5e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  uint64_t t = 0;
  std::map<std::string, std::vector<float>> m, v;

  Adam() = default;
  explicit Adam(const TrainConfig& cfg) : lr(cfg.lr), beta1(cfg.beta1), beta2(cfg.beta2), eps(cfg.adam_eps) {}

  void step(const ParamList<float>& params);
};

// ---------------------------------------------------------------------------
// training stages
// ---------------------------------------------------------------------------

struct StageLog {
  std::vector<float> losses;  // one entry per step
  std::vector<std::pair<uint64_t, double>> metric_history;
  uint64_t steps_run = 0;
  double final_metric = -1.0;
  double seconds = 0.0;
  bool reached_target = false;
};

// VAE pretraining on corpus mels (plumbing; stands in for a pretrained VAE)
StageLog run_stage0(Model& model, const Corpus& train, const TrainConfig& cfg, Adam& adam, Rng& rng,
                    std::ostream* log, uint64_t start_step = 0);

// joint CSR training: L = L_R + L_S over visual processor, text encoder and
// text decoder
StageLog run_stage1(Model& model, const Corpus& train, const Corpus* heldout, const TrainConfig& cfg, Adam& adam,
                    Rng& rng, std::ostream* log, uint64_t start_step = 0);

// generator training: L_G over VPA and denoiser; the visual processor is
// gradient-blocked unless the from-scratch ablation unfreezes it
StageLog run_stage2(Model& model, const Corpus& train, const TrainConfig& cfg, Adam& adam, Rng& rng,
                    std::ostream* log, uint64_t start_step = 0);

// ---------------------------------------------------------------------------
// metrics and inference
// ---------------------------------------------------------------------------

double token_accuracy(const Model& model, const Corpus& corpus, bool use_pose = true);
double csr_corpus_wer(const Model& model, const Corpus& corpus, bool use_pose = true);

struct InferResult {
  Tensor<float> mel_full;     // padded width used in training
  Tensor<float> mel;          // cropped to the sample's syllable count
  std::vector<int> tokens;    // decode_mel of the cropped mel
  double seconds = 0.0;
};

// single-path inference: visual processor -> VPA -> diffusion -> VAE decode
// -> mel decoding; the text decoder is never touched
InferResult infer_sample(const Model& model, const Sample& sample, const CorpusConfig& ccfg, uint64_t seed,
                         bool use_pose = true);

// spectral-tilt estimate of a generated mel given transcript and pitch row
double estimate_spectral_tilt(const Tensor<float>& mel, const std::vector<int>& tokens, int pitch_offset,
                              const CorpusConfig& ccfg);

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
  bool with_generation = true;
  bool use_pose = true;
  uint64_t seed = 1;
  double compare_gen_wer = -1.0;  // external baseline for the ordering flag
};

struct EvalReport {
  int samples = 0;
  double csr_wer = -1.0;
  double token_accuracy = -1.0;
  double gen_wer = -1.0;
  double mel_mse = -1.0;
  double mel_variance = -1.0;
  double identity_correlation = 0.0;
  double infer_seconds_per_sample = 0.0;
  double eval_seconds = 0.0;
  double compare_gen_wer = -1.0;

  std::string to_text() const;
  static EvalReport parse(const std::string& text);
};

EvalReport evaluate(const Model& model, const Corpus& test, const CorpusConfig& ccfg, const EvalOptions& opts);

// ---------------------------------------------------------------------------
// checkpoint glue
// ---------------------------------------------------------------------------

// parameters a stage trains, given the config's freeze/ablation switches
ParamList<float> stage_params(const Model& model, const TrainConfig& cfg);

Checkpoint snapshot(const Model& model, const TrainConfig& cfg, const Adam& adam, const Rng& rng, uint64_t step);

// restores whatever module blocks the checkpoint carries; unknown names are
// an error, absent modules are left untouched
void restore_into(Model& model, const Checkpoint& ckpt);
void restore_adam(Adam& adam, const Checkpoint& ckpt);

// padding helpers shared by training and evaluation
int corpus_max_tokens(const Corpus& corpus);
Tensor<float> padded_mel(const Sample& sample, int pad_cols);

}  // namespace unicue
