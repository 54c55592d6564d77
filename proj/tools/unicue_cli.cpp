// unicue: synthetic cued-speech corpus generation, two-stage training,
// single-path inference and evaluation.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "unicue/gradsuite.hpp"
#include "unicue/pipeline.hpp"

using namespace unicue;

namespace {

struct CommonTrainFlags {
  std::string config_path;
  std::vector<std::string> sets;
};

void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
}

Checkpoint filter_prefixes(const Checkpoint& ckpt, const std::vector<std::string>& prefixes) {
  Checkpoint out = ckpt;
  out.params.clear();
  for (const auto& [name, blob] : ckpt.params)
    for (const auto& p : prefixes)
      if (name.rfind(p, 0) == 0) {
        out.params.emplace(name, blob);
        break;
      }
  return out;
}

ModelDims dims_of(const Checkpoint& ckpt) { return config_from_text(ckpt.config_text).dims; }

void require_same_dims(const ModelDims& a, const ModelDims& b, const std::string& what) {
  if (!(a == b)) throw std::runtime_error("checkpoint/config mismatch: " + what + " was trained with different dims");
}

// assembles a model for inference/eval from stage checkpoints
Model assemble_model(const Corpus& corpus, const std::string& stage1_path, const std::string& stage2_path,
                     const std::string& vae_path, bool* out_use_pose = nullptr) {
  std::optional<Checkpoint> s1, s2, s0;
  if (!stage1_path.empty()) s1 = Checkpoint::load(stage1_path);
  if (!stage2_path.empty()) s2 = Checkpoint::load(stage2_path);
  if (!vae_path.empty()) s0 = Checkpoint::load(vae_path);
  const Checkpoint* dims_source = s1 ? &*s1 : (s2 ? &*s2 : (s0 ? &*s0 : nullptr));
  if (!dims_source) throw std::runtime_error("need at least one checkpoint to assemble a model");
  const ModelDims dims = dims_of(*dims_source);
  Model model(dims, /*seed=*/0, corpus.config.height, corpus.config.width);
  if (s1) {
    // the CSV2S path never needs the text decoder: load only the visual
    // processor from the stage-1 file
    restore_into(model, filter_prefixes(*s1, {"visual."}));
    if (out_use_pose) *out_use_pose = config_from_text(s1->config_text).use_pose;
  }
  if (s0) {
    require_same_dims(dims, dims_of(*s0), "vae checkpoint");
    restore_into(model, filter_prefixes(*s0, {"vae.", "meta."}));
  }
  if (s2) {
    require_same_dims(dims, dims_of(*s2), "stage-2 checkpoint");
    restore_into(model, *s2);  // vpa + denoiser + meta (+ visual when trained from scratch)
    if (out_use_pose) *out_use_pose = config_from_text(s2->config_text).use_pose;
  }
  return model;
}

// also load the decoder/text blocks (for CSR evaluation)
void load_csr_branch(Model& model, const std::string& stage1_path) {
  const Checkpoint s1 = Checkpoint::load(stage1_path);
  restore_into(model, filter_prefixes(s1, {"dec.", "text."}));
}

int cmd_gen_data(const GenerateSpec& spec, const std::string& out_dir) {
  const CorpusSplits splits = generate_corpus(spec);
  const std::string train_path = out_dir + "/train.ucs";
  const std::string test_path = out_dir + "/test.ucs";
  write_corpus(splits.train, train_path);
  write_corpus(splits.test, test_path);
  std::cout << "wrote " << splits.train.samples.size() << " train samples to " << train_path << "\n";
  std::cout << "wrote " << splits.test.samples.size() << " test samples to " << test_path << "\n";
  return 0;
}

int cmd_train(TrainConfig cfg) {
  cfg.validate();
  if (cfg.train_corpus.empty()) throw std::runtime_error("train: --corpus is required");
  if (cfg.out_checkpoint.empty()) throw std::runtime_error("train: --out is required");

  uint64_t start_step = 0;
  std::optional<Checkpoint> resume;
  if (!cfg.resume_checkpoint.empty()) {
    resume = Checkpoint::load(cfg.resume_checkpoint);
    TrainConfig old = config_from_text(resume->config_text);
    require_same_dims(cfg.dims, old.dims, "resume checkpoint");
    if (old.stage != cfg.stage) throw std::runtime_error("resume checkpoint is for stage " + std::to_string(old.stage));
    start_step = resume->step;
  }

  const Corpus train = read_corpus(cfg.train_corpus);
  std::optional<Corpus> heldout;
  if (!cfg.test_corpus.empty()) heldout = read_corpus(cfg.test_corpus);

  Model model(cfg.dims, cfg.seed, train.config.height, train.config.width);
  Adam adam(cfg);
  Rng rng = Rng(cfg.seed).fork(100 + static_cast<uint64_t>(cfg.stage));

  if (cfg.stage == 2) {
    if (cfg.vae_checkpoint.empty()) throw std::runtime_error("train --stage 2 needs --vae (stage-0 checkpoint)");
    const Checkpoint vae_ckpt = Checkpoint::load(cfg.vae_checkpoint);
    require_same_dims(cfg.dims, dims_of(vae_ckpt), "vae checkpoint");
    restore_into(model, filter_prefixes(vae_ckpt, {"vae.", "meta."}));
    if (!cfg.csv2s_from_scratch) {
      if (cfg.init_checkpoint.empty())
        throw std::runtime_error(
            "train --stage 2 needs --init (stage-1 checkpoint); pass --csv2s-from-scratch to train the visual "
            "processor from L_G alone");
      const Checkpoint s1 = Checkpoint::load(cfg.init_checkpoint);
      require_same_dims(cfg.dims, dims_of(s1), "stage-1 checkpoint");
      restore_into(model, filter_prefixes(s1, {"visual."}));
    }
  }

  if (resume) {
    restore_into(model, *resume);
    restore_adam(adam, *resume);
    rng.set_state(resume->rng_state);
  }

  StageLog log;
  switch (cfg.stage) {
    case 0: log = run_stage0(model, train, cfg, adam, rng, &std::cout, start_step); break;
    case 1: log = run_stage1(model, train, heldout ? &*heldout : nullptr, cfg, adam, rng, &std::cout, start_step); break;
    case 2: log = run_stage2(model, train, cfg, adam, rng, &std::cout, start_step); break;
    default: throw std::runtime_error("train: stage must be 0, 1 or 2");
  }

  const Checkpoint ckpt = snapshot(model, cfg, adam, rng, log.steps_run);
  ckpt.save(cfg.out_checkpoint);
  std::cout << "saved checkpoint to " << cfg.out_checkpoint << " after " << log.steps_run << " steps ("
            << log.seconds << " s)\n";
  return 0;
}

int cmd_infer(const std::string& corpus_path, int index, const std::string& s1, const std::string& s2,
              const std::string& vae, uint64_t seed, bool no_pose, const std::string& out_mel) {
  const Corpus corpus = read_corpus(corpus_path);
  if (index < 0 || index >= static_cast<int>(corpus.samples.size()))
    throw std::runtime_error("infer: index " + std::to_string(index) + " outside corpus of " +
                             std::to_string(corpus.samples.size()) + " samples");
  bool use_pose = true;
  Model model = assemble_model(corpus, s1, s2, vae, &use_pose);
  if (no_pose) use_pose = false;
  const Sample& sample = corpus.samples[static_cast<size_t>(index)];
  const InferResult result = infer_sample(model, sample, corpus.config, seed, use_pose);

  std::cout << "reference:";
  for (int t : sample.tokens) std::cout << ' ' << t;
  std::cout << "\ngenerated:";
  for (int t : result.tokens) std::cout << ' ' << t;
  std::cout << "\nwer: " << wer(sample.tokens, result.tokens) << "\n";
  std::cout << "inference_seconds: " << result.seconds << "\n";
  if (!out_mel.empty()) {
    std::ofstream f(out_mel, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + out_mel);
    const uint32_t rows = static_cast<uint32_t>(result.mel_full.dim(0));
    const uint32_t cols = static_cast<uint32_t>(result.mel_full.dim(1));
    f.write("UNICUEMEL", 9);
    f.write(reinterpret_cast<const char*>(&rows), 4);
    f.write(reinterpret_cast<const char*>(&cols), 4);
    f.write(reinterpret_cast<const char*>(result.mel_full.data()),
            static_cast<std::streamsize>(result.mel_full.numel() * sizeof(float)));
    std::cout << "wrote mel (" << rows << "x" << cols << ") to " << out_mel << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& corpus_path, const std::string& s1, const std::string& s2, const std::string& vae,
             const std::string& report_path, uint64_t seed, bool no_pose, double compare_gen_wer) {
  const Corpus corpus = read_corpus(corpus_path);
  bool use_pose = true;
  Model model = assemble_model(corpus, s1, s2, vae, &use_pose);
  if (!s1.empty()) load_csr_branch(model, s1);
  if (no_pose) use_pose = false;
  EvalOptions opts;
  opts.with_generation = !s2.empty() && !vae.empty();
  opts.use_pose = use_pose;
  opts.seed = seed;
  opts.compare_gen_wer = compare_gen_wer;
  const EvalReport report = evaluate(model, corpus, corpus.config, opts);
  const std::string text = report.to_text();
  std::cout << text;
  if (!report_path.empty()) {
    std::ofstream f(report_path);
    if (!f) throw std::runtime_error("cannot open " + report_path);
    f << text;
    std::cout << "wrote report to " << report_path << "\n";
  }
  return 0;
}

int cmd_grad_check() {
  const GradSuiteResult result = run_gradient_suite();
  std::printf("%-28s %s\n", "module", "max_rel_err");
  for (const auto& item : result.items) std::printf("%-28s %.3g\n", item.name.c_str(), item.max_rel_err);
  std::printf("total_seconds %.2f\n", result.seconds);
  const bool ok = result.all_within(1e-4);
  std::printf("gradient suite: %s (worst %.3g, tolerance 1e-4)\n", ok ? "PASS" : "FAIL", result.worst());
  return ok ? 0 : 1;
}

int cmd_bench(uint64_t seed) {
  const auto time_it = [](auto&& fn, int reps) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
  };
  ModelDims dims;
  Model model(dims, seed);
  CorpusConfig ccfg;
  const Sample sample = render_sample({3, 17, 28, 9}, make_cuer_profile(1), seed, ccfg);
  model.mel_pad_cols = static_cast<int>(sample.tokens.size()) * ccfg.mel_cols_per_syllable;

  const double fwd = time_it(
      [&] {
        NoTapeScope<float> nt;
        model.visual.mixed_embedding(sample.video, sample.pose);
      },
      5);
  std::printf("visual forward (T=%d): %.1f ms\n", sample.video.dim(0), 1e3 * fwd);

  const double train_step = time_it(
      [&] {
        TapeScope<float> scope;
        Tensor<float> zmv = model.visual.mixed_embedding(sample.video, sample.pose);
        const TeacherForced tf = teacher_forcing(sample.tokens);
        Tensor<float> loss = csr_loss(model.decoder.decode_logits(zmv, tf.prefix), tf.targets);
        scope.backward(loss);
      },
      5);
  std::printf("stage-1 fwd+bwd, one sample: %.1f ms\n", 1e3 * train_step);

  Tensor<float> zmv;
  {
    NoTapeScope<float> nt;
    zmv = model.visual.mixed_embedding(sample.video, sample.pose);
  }
  Tensor<float> cond;
  {
    NoTapeScope<float> nt;
    Rng qrng(seed);
    model.vpa.init_queries(1.0, qrng);
    cond = model.vpa.forward(zmv);
  }
  const Shape latent_shape = {1, dims.latent_channels, ccfg.mel_rows / 4, model.mel_pad_cols / 4};
  const double sampler = time_it(
      [&] { sample_latent(model.denoiser, cond, latent_shape, model.sched, seed); }, 3);
  std::printf("diffusion sampler (%d steps): %.1f ms\n", model.sched.steps(), 1e3 * sampler);

  const double inf = time_it([&] { infer_sample(model, sample, ccfg, seed); }, 3);
  std::printf("single-path inference end-to-end: %.1f ms\n", 1e3 * inf);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unicue: unified cued-speech recognition and video-to-speech generation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic cued-speech corpus");
  GenerateSpec spec;
  std::string out_dir = ".";
  gen->add_option("--sentences", spec.n_sentences, "sentence count");
  gen->add_option("--len-min", spec.len_min, "minimum syllables per sentence");
  gen->add_option("--len-max", spec.len_max, "maximum syllables per sentence");
  gen->add_option("--cuers", spec.n_cuers, "number of cuer profiles");
  gen->add_option("--split", spec.split_ratio, "train fraction");
  gen->add_option("--seed", spec.seed, "generation seed");
  gen->add_option("--out", out_dir, "output directory");
  gen->add_option("--height", spec.config.height, "frame height");
  gen->add_option("--width", spec.config.width, "frame width");
  gen->add_option("--frames-per-syllable", spec.config.frames_per_syllable, "frames per syllable");
  gen->add_option("--hand-lead", spec.config.hand_lead, "hand-preceding offset in frames");
  gen->add_option("--noise", spec.config.noise_amplitude, "additive noise amplitude");

  // train
  auto* train = app.add_subcommand("train", "run a training stage");
  CommonTrainFlags tf;
  TrainConfig cfg;
  int stage_flag = -1;
  std::string corpus_flag, test_flag, out_flag, init_flag, vae_flag, resume_flag;
  long long steps_flag = -1;
  double lr_flag = -1;
  long long seed_flag = -1;
  int batch_flag = -1;
  bool no_align = false, no_pose = false, from_scratch = false, unfreeze = false;
  train->add_option("--stage", stage_flag, "training stage: 0 (vae), 1 (csr), 2 (generator)")->required();
  train->add_option("--config", tf.config_path, "key=value config file");
  train->add_option("--set", tf.sets, "override a config key, e.g. --set lr=0.001");
  train->add_option("--corpus", corpus_flag, "training corpus file");
  train->add_option("--test-corpus", test_flag, "held-out corpus for periodic metrics");
  train->add_option("--out", out_flag, "output checkpoint path");
  train->add_option("--init", init_flag, "stage-1 checkpoint (stage 2)");
  train->add_option("--vae", vae_flag, "stage-0 checkpoint (stage 2)");
  train->add_option("--resume", resume_flag, "resume from a checkpoint");
  train->add_option("--steps", steps_flag, "step budget");
  train->add_option("--lr", lr_flag, "learning rate");
  train->add_option("--seed", seed_flag, "training seed");
  train->add_option("--batch", batch_flag, "mini-batch size");
  train->add_flag("--no-align-loss", no_align, "disable the semantic alignment pool (ablation)");
  train->add_flag("--no-pose", no_pose, "zero the pose stream (ablation)");
  train->add_flag("--csv2s-from-scratch", from_scratch, "stage 2 without stage-1 weights, visual trained by L_G");
  train->add_flag("--unfreeze-visual", unfreeze, "train the visual processor in stage 2");

  // infer
  auto* infer = app.add_subcommand("infer", "single-path inference on one corpus sample");
  std::string i_corpus, i_s1, i_s2, i_vae, i_out_mel;
  int i_index = 0;
  uint64_t i_seed = 1;
  bool i_no_pose = false;
  infer->add_option("--corpus", i_corpus, "corpus file")->required();
  infer->add_option("--index", i_index, "sample index");
  infer->add_option("--stage1", i_s1, "stage-1 checkpoint")->required();
  infer->add_option("--stage2", i_s2, "stage-2 checkpoint")->required();
  infer->add_option("--vae", i_vae, "stage-0 checkpoint")->required();
  infer->add_option("--seed", i_seed, "sampling seed");
  infer->add_flag("--no-pose", i_no_pose, "zero the pose stream");
  infer->add_option("--out-mel", i_out_mel, "write the generated mel here");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate checkpoints on a corpus");
  std::string e_corpus, e_s1, e_s2, e_vae, e_report;
  uint64_t e_seed = 1;
  bool e_no_pose = false;
  double e_compare = -1.0;
  eval_cmd->add_option("--corpus", e_corpus, "corpus file")->required();
  eval_cmd->add_option("--stage1", e_s1, "stage-1 checkpoint")->required();
  eval_cmd->add_option("--stage2", e_s2, "stage-2 checkpoint");
  eval_cmd->add_option("--vae", e_vae, "stage-0 checkpoint");
  eval_cmd->add_option("--report", e_report, "write the report here");
  eval_cmd->add_option("--seed", e_seed, "sampling seed");
  eval_cmd->add_flag("--no-pose", e_no_pose, "zero the pose stream");
  eval_cmd->add_option("--compare-gen-wer", e_compare, "baseline generated-speech WER for the ordering flag");

  // grad-check / bench
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
  auto* bench = app.add_subcommand("bench", "timing of the main blocks");
  uint64_t b_seed = 1;
  bench->add_option("--seed", b_seed, "bench seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(spec, out_dir);
    if (train->parsed()) {
      if (!tf.config_path.empty()) cfg = load_config_file(tf.config_path);
      apply_overrides(cfg, tf.sets);
      cfg.stage = stage_flag;
      if (!corpus_flag.empty()) cfg.train_corpus = corpus_flag;
      if (!test_flag.empty()) cfg.test_corpus = test_flag;
      if (!out_flag.empty()) cfg.out_checkpoint = out_flag;
      if (!init_flag.empty()) cfg.init_checkpoint = init_flag;
      if (!vae_flag.empty()) cfg.vae_checkpoint = vae_flag;
      if (!resume_flag.empty()) cfg.resume_checkpoint = resume_flag;
      if (steps_flag >= 0) cfg.steps = static_cast<int>(steps_flag);
      if (lr_flag > 0) cfg.lr = static_cast<float>(lr_flag);
      if (seed_flag >= 0) cfg.seed = static_cast<uint64_t>(seed_flag);
      if (batch_flag > 0) cfg.batch_size = batch_flag;
      if (no_align) cfg.use_align_loss = false;
      if (no_pose) cfg.use_pose = false;
      if (from_scratch) cfg.csv2s_from_scratch = true;
      if (from_scratch || unfreeze) cfg.freeze_visual = false;
      return cmd_train(cfg);
    }
    if (infer->parsed()) return cmd_infer(i_corpus, i_index, i_s1, i_s2, i_vae, i_seed, i_no_pose, i_out_mel);
    if (eval_cmd->parsed()) return cmd_eval(e_corpus, e_s1, e_s2, e_vae, e_report, e_seed, e_no_pose, e_compare);
    if (gc->parsed()) return cmd_grad_check();
    if (bench->parsed()) return cmd_bench(b_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
