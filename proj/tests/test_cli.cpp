#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "unicue/checkpoint.hpp"
#include "unicue/pipeline.hpp"

// End-to-end checks of the command-line surface against the built binary.

namespace fs = std::filesystem;
using namespace unicue;

namespace {

const char* cli_path() { return UNICUE_CLI_PATH; }

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

RunResult run_cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(cli_path()) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
  };
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::vector<uint8_t> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path scratch_dir() {
  const fs::path dir = fs::current_path() / "cli_scratch";
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// tiny-geometry flags shared by the corpus commands
const std::string kGen =
    " --sentences 10 --len-min 1 --len-max 2 --cuers 3 --split 0.8 --height 16 --width 16"
    " --frames-per-syllable 3 --hand-lead 1";
const std::string kDims =
    " --set dims.dim=16 --set dims.heads=2 --set dims.encoder_depth=1 --set dims.decoder_depth=1"
    " --set dims.conv_channels=4,6 --set dims.vpa_queries=2 --set dims.vae_channels1=4 --set dims.vae_channels2=6"
    " --set dims.latent_channels=2 --set dims.denoiser_channels=8 --set dims.denoiser_heads=2"
    " --set dims.temb_dim=8 --set dims.diffusion_steps=10 --set log_every=0";

}  // namespace

TEST_CASE("gen-data is byte-identical across runs") {
  const fs::path dir = scratch_dir();
  fs::create_directories(dir / "a");
  fs::create_directories(dir / "b");
  const RunResult r1 = run_cli("gen-data" + kGen + " --seed 7 --out " + (dir / "a").string(), dir);
  REQUIRE(r1.exit_code == 0);
  const RunResult r2 = run_cli("gen-data" + kGen + " --seed 7 --out " + (dir / "b").string(), dir);
  REQUIRE(r2.exit_code == 0);
  CHECK(file_bytes(dir / "a" / "train.ucs") == file_bytes(dir / "b" / "train.ucs"));
  CHECK(file_bytes(dir / "a" / "test.ucs") == file_bytes(dir / "b" / "test.ucs"));
}

TEST_CASE("stage 2 without a stage-1 checkpoint fails with an explicit message") {
  const fs::path dir = scratch_dir();
  REQUIRE(run_cli("gen-data" + kGen + " --seed 3 --out " + dir.string(), dir).exit_code == 0);
  const std::string corpus = (dir / "train.ucs").string();
  const RunResult vae = run_cli("train --stage 0 --steps 5" + kDims + " --corpus " + corpus + " --out " +
                                    (dir / "vae.ckpt").string(),
                                dir);
  REQUIRE(vae.exit_code == 0);
  const RunResult r = run_cli("train --stage 2 --steps 2" + kDims + " --corpus " + corpus + " --vae " +
                                  (dir / "vae.ckpt").string() + " --out " + (dir / "s2.ckpt").string(),
                              dir);
  CHECK(r.exit_code != 0);
  CHECK(r.err.find("error:") != std::string::npos);
  CHECK(r.err.find("stage-1 checkpoint") != std::string::npos);
}

TEST_CASE("full tiny pipeline: gen-data, train 0/1/2, infer, eval") {
  const fs::path dir = scratch_dir();
  REQUIRE(run_cli("gen-data" + kGen + " --seed 5 --out " + dir.string(), dir).exit_code == 0);
  const std::string train_c = (dir / "train.ucs").string();
  const std::string test_c = (dir / "test.ucs").string();

  REQUIRE(run_cli("train --stage 0 --steps 20 --seed 1" + kDims + " --corpus " + train_c + " --out " +
                      (dir / "vae.ckpt").string(),
                  dir)
              .exit_code == 0);
  REQUIRE(run_cli("train --stage 1 --steps 20 --seed 1" + kDims + " --corpus " + train_c + " --out " +
                      (dir / "s1.ckpt").string(),
                  dir)
              .exit_code == 0);
  REQUIRE(run_cli("train --stage 2 --steps 20 --seed 1" + kDims + " --corpus " + train_c + " --init " +
                      (dir / "s1.ckpt").string() + " --vae " + (dir / "vae.ckpt").string() + " --out " +
                      (dir / "s2.ckpt").string(),
                  dir)
              .exit_code == 0);

  const std::string ckpts = " --stage1 " + (dir / "s1.ckpt").string() + " --stage2 " + (dir / "s2.ckpt").string() +
                            " --vae " + (dir / "vae.ckpt").string();
  const RunResult inf =
      run_cli("infer --corpus " + test_c + " --index 0 --seed 9" + ckpts + " --out-mel " + (dir / "gen.mel").string(),
              dir);
  REQUIRE(inf.exit_code == 0);
  CHECK(inf.out.find("generated:") != std::string::npos);
  CHECK(fs::exists(dir / "gen.mel"));

  // determinism of the inference path through the CLI
  const RunResult inf2 = run_cli("infer --corpus " + test_c + " --index 0 --seed 9" + ckpts, dir);
  REQUIRE(inf2.exit_code == 0);
  const auto line_of = [](const std::string& text, const std::string& key) {
    const size_t at = text.find(key);
    REQUIRE(at != std::string::npos);
    return text.substr(at, text.find('\n', at) - at);
  };
  CHECK(line_of(inf.out, "generated:") == line_of(inf2.out, "generated:"));

  const RunResult ev =
      run_cli("eval --corpus " + test_c + ckpts + " --seed 4 --report " + (dir / "report.txt").string(), dir);
  REQUIRE(ev.exit_code == 0);
  std::ifstream rf(dir / "report.txt");
  std::ostringstream os;
  os << rf.rdbuf();
  const EvalReport report = EvalReport::parse(os.str());
  CHECK(report.samples == 2);
  CHECK(report.csr_wer >= 0.0);
  CHECK(report.gen_wer >= 0.0);
  CHECK(report.mel_variance > 0.0);
}

TEST_CASE("inference runs from a stage-1 checkpoint stripped of decoder weights") {
  const fs::path dir = scratch_dir();
  REQUIRE(run_cli("gen-data" + kGen + " --seed 5 --out " + dir.string(), dir).exit_code == 0);
  const std::string train_c = (dir / "train.ucs").string();
  const std::string test_c = (dir / "test.ucs").string();
  REQUIRE(run_cli("train --stage 0 --steps 10 --seed 1" + kDims + " --corpus " + train_c + " --out " +
                      (dir / "vae.ckpt").string(),
                  dir)
              .exit_code == 0);
  REQUIRE(run_cli("train --stage 1 --steps 10 --seed 1" + kDims + " --corpus " + train_c + " --out " +
                      (dir / "s1.ckpt").string(),
                  dir)
              .exit_code == 0);
  REQUIRE(run_cli("train --stage 2 --steps 10 --seed 1" + kDims + " --corpus " + train_c + " --init " +
                      (dir / "s1.ckpt").string() + " --vae " + (dir / "vae.ckpt").string() + " --out " +
                      (dir / "s2.ckpt").string(),
                  dir)
              .exit_code == 0);

  // strip the text decoder and text encoder blobs from the stage-1 file
  Checkpoint s1 = Checkpoint::load((dir / "s1.ckpt").string());
  for (auto it = s1.params.begin(); it != s1.params.end();) {
    if (it->first.rfind("dec.", 0) == 0 || it->first.rfind("text.", 0) == 0)
      it = s1.params.erase(it);
    else
      ++it;
  }
  s1.save((dir / "s1_stripped.ckpt").string());

  const RunResult inf = run_cli("infer --corpus " + test_c + " --index 1 --seed 2 --stage1 " +
                                    (dir / "s1_stripped.ckpt").string() + " --stage2 " + (dir / "s2.ckpt").string() +
                                    " --vae " + (dir / "vae.ckpt").string(),
                                dir);
  CHECK(inf.exit_code == 0);
  CHECK(inf.out.find("generated:") != std::string::npos);
}

TEST_CASE("grad-check subcommand passes") {
  const fs::path dir = scratch_dir();
  const RunResult r = run_cli("grad-check", dir);
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("gradient suite: PASS") != std::string::npos);
}

TEST_CASE("checkpoint resume through the CLI matches the uninterrupted run") {
  const fs::path dir = scratch_dir();
  REQUIRE(run_cli("gen-data" + kGen + " --seed 6 --out " + dir.string(), dir).exit_code == 0);
  const std::string train_c = (dir / "train.ucs").string();

  const RunResult full = run_cli("train --stage 1 --steps 10 --seed 2" + kDims + " --corpus " + train_c + " --out " +
                                     (dir / "full.ckpt").string(),
                                 dir);
  REQUIRE(full.exit_code == 0);
  REQUIRE(run_cli("train --stage 1 --steps 5 --seed 2" + kDims + " --corpus " + train_c + " --out " +
                      (dir / "half.ckpt").string(),
                  dir)
              .exit_code == 0);
  REQUIRE(run_cli("train --stage 1 --steps 10 --seed 2" + kDims + " --corpus " + train_c + " --resume " +
                      (dir / "half.ckpt").string() + " --out " + (dir / "resumed.ckpt").string(),
                  dir)
              .exit_code == 0);

  const Checkpoint a = Checkpoint::load((dir / "full.ckpt").string());
  const Checkpoint b = Checkpoint::load((dir / "resumed.ckpt").string());
  REQUIRE(a.params.size() == b.params.size());
  for (const auto& [name, blob] : a.params) {
    INFO(name);
    CHECK(b.params.at(name).data == blob.data);
  }
}
