#include "unicue/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace unicue {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("config: lr must be positive");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (stage < 0 || stage > 2) throw std::invalid_argument("config: stage must be 0, 1 or 2");
  if (steps < 0) throw std::invalid_argument("config: steps must be nonnegative");
  if (dims.dim % dims.heads != 0) throw std::invalid_argument("config: dim must be divisible by heads");
  if (!(dims.alpha_first > dims.alpha_min && dims.alpha_min > 0))
    throw std::invalid_argument("config: need alpha_first > alpha_min > 0");
}

namespace {

std::string channels_to_text(const std::vector<int>& cs) {
  std::ostringstream os;
  for (size_t i = 0; i < cs.size(); ++i) os << (i ? "," : "") << cs[i];
  return os.str();
}

std::vector<int> channels_from_text(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(std::stoi(tok));
  if (out.empty()) throw std::invalid_argument("config: empty channel list");
  return out;
}

}  // namespace

std::string config_to_text(const TrainConfig& c) {
  std::ostringstream os;
  os << "stage = " << c.stage << "\n";
  os << "lr = " << c.lr << "\n";
  os << "beta1 = " << c.beta1 << "\n";
  os << "beta2 = " << c.beta2 << "\n";
  os << "adam_eps = " << c.adam_eps << "\n";
  os << "batch_size = " << c.batch_size << "\n";
  os << "steps = " << c.steps << "\n";
  os << "seed = " << c.seed << "\n";
  os << "train_corpus = " << c.train_corpus << "\n";
  os << "test_corpus = " << c.test_corpus << "\n";
  os << "init_checkpoint = " << c.init_checkpoint << "\n";
  os << "vae_checkpoint = " << c.vae_checkpoint << "\n";
  os << "out_checkpoint = " << c.out_checkpoint << "\n";
  os << "resume_checkpoint = " << c.resume_checkpoint << "\n";
  os << "freeze_visual = " << (c.freeze_visual ? 1 : 0) << "\n";
  os << "use_align_loss = " << (c.use_align_loss ? 1 : 0) << "\n";
  os << "use_pose = " << (c.use_pose ? 1 : 0) << "\n";
  os << "csv2s_from_scratch = " << (c.csv2s_from_scratch ? 1 : 0) << "\n";
  os << "log_every = " << c.log_every << "\n";
  os << "eval_every = " << c.eval_every << "\n";
  os << "target_wer = " << c.target_wer << "\n";
  os << "target_token_accuracy = " << c.target_token_accuracy << "\n";
  os << "target_loss = " << c.target_loss << "\n";
  os << "mel_pad_cols = " << c.mel_pad_cols << "\n";
  os << "dims.dim = " << c.dims.dim << "\n";
  os << "dims.heads = " << c.dims.heads << "\n";
  os << "dims.encoder_depth = " << c.dims.encoder_depth << "\n";
  os << "dims.decoder_depth = " << c.dims.decoder_depth << "\n";
  os << "dims.conv_channels = " << channels_to_text(c.dims.conv_channels) << "\n";
  os << "dims.vpa_queries = " << c.dims.vpa_queries << "\n";
  os << "dims.vae_channels1 = " << c.dims.vae_channels1 << "\n";
  os << "dims.vae_channels2 = " << c.dims.vae_channels2 << "\n";
  os << "dims.latent_channels = " << c.dims.latent_channels << "\n";
  os << "dims.kl_weight = " << c.dims.kl_weight << "\n";
  os << "dims.denoiser_channels = " << c.dims.denoiser_channels << "\n";
  os << "dims.denoiser_heads = " << c.dims.denoiser_heads << "\n";
  os << "dims.temb_dim = " << c.dims.temb_dim << "\n";
  os << "dims.diffusion_steps = " << c.dims.diffusion_steps << "\n";
  os << "dims.alpha_first = " << c.dims.alpha_first << "\n";
  os << "dims.alpha_min = " << c.dims.alpha_min << "\n";
  return os.str();
}

void apply_config_entry(TrainConfig& c, const std::string& key, const std::string& value) {
  auto as_int = [&]() { return std::stoi(value); };
  auto as_float = [&]() { return std::stof(value); };
  auto as_double = [&]() { return std::stod(value); };
  auto as_u64 = [&]() { return static_cast<uint64_t>(std::stoull(value)); };
  auto as_bool = [&]() {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw std::invalid_argument("config: boolean key '" + key + "' needs 0/1/true/false, got '" + value + "'");
  };

  if (key == "stage") c.stage = as_int();
  else if (key == "lr") c.lr = as_float();
  else if (key == "beta1") c.beta1 = as_float();
  else if (key == "beta2") c.beta2 = as_float();
  else if (key == "adam_eps") c.adam_eps = as_float();
  else if (key == "batch_size") c.batch_size = as_int();
  else if (key == "steps") c.steps = as_int();
  else if (key == "seed") c.seed = as_u64();
  else if (key == "train_corpus") c.train_corpus = value;
  else if (key == "test_corpus") c.test_corpus = value;
  else if (key == "init_checkpoint") c.init_checkpoint = value;
  else if (key == "vae_checkpoint") c.vae_checkpoint = value;
  else if (key == "out_checkpoint") c.out_checkpoint = value;
  else if (key == "resume_checkpoint") c.resume_checkpoint = value;
  else if (key == "freeze_visual") c.freeze_visual = as_bool();
  else if (key == "use_align_loss") c.use_align_loss = as_bool();
  else if (key == "use_pose") c.use_pose = as_bool();
  else if (key == "csv2s_from_scratch") c.csv2s_from_scratch = as_bool();
  else if (key == "log_every") c.log_every = as_int();
  else if (key == "eval_every") c.eval_every = as_int();
  else if (key == "target_wer") c.target_wer = as_double();
  else if (key == "target_token_accuracy") c.target_token_accuracy = as_double();
  else if (key == "target_loss") c.target_loss = as_double();
  else if (key == "mel_pad_cols") c.mel_pad_cols = as_int();
  else if (key == "dims.dim") c.dims.dim = as_int();
  else if (key == "dims.heads") c.dims.heads = as_int();
  else if (key == "dims.encoder_depth") c.dims.encoder_depth = as_int();
  else if (key == "dims.decoder_depth") c.dims.decoder_depth = as_int();
  else if (key == "dims.conv_channels") c.dims.conv_channels = channels_from_text(value);
  else if (key == "dims.vpa_queries") c.dims.vpa_queries = as_int();
  else if (key == "dims.vae_channels1") c.dims.vae_channels1 = as_int();
  else if (key == "dims.vae_channels2") c.dims.vae_channels2 = as_int();
  else if (key == "dims.latent_channels") c.dims.latent_channels = as_int();
  else if (key == "dims.kl_weight") c.dims.kl_weight = as_float();
  else if (key == "dims.denoiser_channels") c.dims.denoiser_channels = as_int();
  else if (key == "dims.denoiser_heads") c.dims.denoiser_heads = as_int();
  else if (key == "dims.temb_dim") c.dims.temb_dim = as_int();
  else if (key == "dims.diffusion_steps") c.dims.diffusion_steps = as_int();
  else if (key == "dims.alpha_first") c.dims.alpha_first = as_double();
  else if (key == "dims.alpha_min") c.dims.alpha_min = as_double();
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

TrainConfig config_from_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = true;
      for (char ch : line) blank &= std::isspace(static_cast<unsigned char>(ch)) != 0;
      if (blank) continue;
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

TrainConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return config_from_text(os.str());
}

}  // namespace unicue
