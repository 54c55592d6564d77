#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "unicue/corpus.hpp"
#include "unicue/diffusion.hpp"
#include "unicue/visual.hpp"

// Training configuration: a flat key=value text format (files and CLI flag
// overrides share the same keys) plus the model dimension block.

namespace unicue {

struct ModelDims {
  int dim = 64;
  int heads = 4;
  int encoder_depth = 2;
  int decoder_depth = 2;
  std::vector<int> conv_channels = {16, 32};
  int vpa_queries = 8;
  int vae_channels1 = 16;
  int vae_channels2 = 32;
  int latent_channels = 4;
  float kl_weight = 1e-3f;
  int denoiser_channels = 32;
  int denoiser_heads = 4;
  int temb_dim = 32;
  int diffusion_steps = 50;
  double alpha_first = 0.98;
  double alpha_min = 0.02;

  bool operator==(const ModelDims&) const = default;
};

struct TrainConfig {
  int stage = 1;
  float lr = 5e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
  int batch_size = 2;
  int steps = 1000;
  uint64_t seed = 1;

  std::string train_corpus;
  std::string test_corpus;
  std::string init_checkpoint;  // stage-1 weights for stage 2
  std::string vae_checkpoint;   // stage-0 weights for stage 2
  std::string out_checkpoint;
  std::string resume_checkpoint;

  bool freeze_visual = true;   // stage-2 freeze contract
  bool use_align_loss = true;  // alignment-pool ablation switch
  bool use_pose = true;        // pose-stream ablation switch
  bool csv2s_from_scratch = false;  // stage 2 without stage-1 weights

  int log_every = 100;
  int eval_every = 0;        // held-out metric period during stage 1
  double target_wer = -1.0;  // stop early when held-out WER reaches this
  double target_token_accuracy = -1.0;
  double target_loss = -1.0;
  int mel_pad_cols = 0;  // 0 = derive from the training corpus

  ModelDims dims;

  void validate() const;
};

// key=value text round-trip; unknown keys are rejected
std::string config_to_text(const TrainConfig& cfg);
TrainConfig config_from_text(const std::string& text);
void apply_config_entry(TrainConfig& cfg, const std::string& key, const std::string& value);
TrainConfig load_config_file(const std::string& path);

}  // namespace unicue
