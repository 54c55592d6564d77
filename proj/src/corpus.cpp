#include "unicue/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

namespace unicue {

static_assert(std::endian::native == std::endian::little, "corpus files are little-endian");

CueCode CueCode::from_token(int id) {
  if (id < 0 || id >= kSyllables)
    throw std::invalid_argument("token id " + std::to_string(id) + " is not a syllable (0.." +
                                std::to_string(kSyllables - 1) + ")");
  return CueCode{id / kHandPositions + 1, id % kHandPositions + 1};
}

CuerProfile make_cuer_profile(uint32_t id) {
  CuerProfile p;
  p.cuer_id = id;
  p.pitch_offset = kPitchOffsetMin + static_cast<int>(id % 7);
  p.spectral_tilt = kAdmissibleTilts[id % kAdmissibleTilts.size()];
  p.glyph_thickness = 1.0f + 0.30f * static_cast<float>(id % 4);
  p.glyph_scale = 0.85f + 0.06f * static_cast<float>(id % 6);
  p.hearing_impaired = (id % 3) == 2;
  return p;
}

// ---------------------------------------------------------------------------
// mel templates
// ---------------------------------------------------------------------------

// Band amplitudes are geometric in the shape/position index. The ratio 1.15
// exceeds the worst-case multiplicative tilt distortion (1.05/0.95), and the
// vowel range [0.30, 0.53] stays below the consonant range [0.95, 2.80], so
// distinct tokens stay nearest-neighbor separable across the whole
// admissible profile grid even when a band falls off the grid.
static constexpr float kAmpRatio = 1.15f;
static constexpr float kConsonantBase = 1.0f;
static constexpr float kVowelBase = 0.30f;
static constexpr float kMelScale = 3.0f;

static float row_gain(int row, float tilt, int mel_rows) {
  const float u = static_cast<float>(row) / static_cast<float>(mel_rows - 1) - 0.5f;
  return 1.0f + tilt * u;
}

std::vector<float> mel_template_column(int token, int pitch_offset, float spectral_tilt, const CorpusConfig& cfg) {
  const CueCode code = CueCode::from_token(token);
  std::vector<float> col(static_cast<size_t>(cfg.mel_rows), 0.0f);
  const int r_cons = 2 * code.consonant_shape + pitch_offset;
  const int r_vow = 20 + 2 * code.vowel_position + pitch_offset;
  const float amp_cons = kConsonantBase * std::pow(kAmpRatio, static_cast<float>(code.consonant_shape - 1));
  const float amp_vow = kVowelBase * std::pow(kAmpRatio, static_cast<float>(code.vowel_position - 1));
  if (r_cons >= 0 && r_cons < cfg.mel_rows)
    col[static_cast<size_t>(r_cons)] += amp_cons * row_gain(r_cons, spectral_tilt, cfg.mel_rows) / kMelScale;
  if (r_vow >= 0 && r_vow < cfg.mel_rows)
    col[static_cast<size_t>(r_vow)] += amp_vow * row_gain(r_vow, spectral_tilt, cfg.mel_rows) / kMelScale;
  return col;
}

Tensor<float> synth_mel(const std::vector<int>& tokens, const CuerProfile& cuer, const CorpusConfig& cfg) {
  if (tokens.empty()) throw std::invalid_argument("synth_mel: empty token sequence");
  const int f = cfg.mel_rows;
  const int m = static_cast<int>(tokens.size()) * cfg.mel_cols_per_syllable;
  Tensor<float> mel({f, m});
  float* p = mel.data();
  for (size_t k = 0; k < tokens.size(); ++k) {
    const std::vector<float> col = mel_template_column(tokens[k], cuer.pitch_offset, cuer.spectral_tilt, cfg);
    for (int r = 0; r < f; ++r)
      for (int c = 0; c < cfg.mel_cols_per_syllable; ++c)
        p[static_cast<size_t>(r) * m + k * cfg.mel_cols_per_syllable + c] = col[static_cast<size_t>(r)];
  }
  return mel;
}

std::vector<int> decode_mel(const Tensor<float>& mel, const std::optional<CuerProfile>& cuer_hint,
                            const CorpusConfig& cfg) {
  if (mel.ndim() != 2 || mel.dim(0) != cfg.mel_rows)
    throw std::invalid_argument("decode_mel: expected (" + std::to_string(cfg.mel_rows) + ",M) mel, got " +
                                shape_str(mel.shape()));
  const int m = mel.dim(1);
  if (m % cfg.mel_cols_per_syllable != 0)
    throw std::invalid_argument("decode_mel: " + std::to_string(m) + " columns not divisible by " +
                                std::to_string(cfg.mel_cols_per_syllable));
  const int n_syl = m / cfg.mel_cols_per_syllable;
  const int f = cfg.mel_rows;
  const int w = cfg.mel_cols_per_syllable;

  // hypothesis templates: with a hint only that (offset, tilt); else the grid
  struct Hypo {
    std::vector<float> col;
    float norm_sq;  // w * sum_r col_r^2
  };
  std::vector<std::vector<Hypo>> hypos(static_cast<size_t>(kSyllables));
  for (int tok = 0; tok < kSyllables; ++tok) {
    if (cuer_hint) {
      Hypo h;
      h.col = mel_template_column(tok, cuer_hint->pitch_offset, cuer_hint->spectral_tilt, cfg);
      h.norm_sq = 0.0f;
      for (float v : h.col) h.norm_sq += v * v;
      h.norm_sq *= static_cast<float>(w);
      hypos[static_cast<size_t>(tok)].push_back(std::move(h));
    } else {
      for (int po = kPitchOffsetMin; po <= kPitchOffsetMax; ++po)
        for (float tilt : kAdmissibleTilts) {
          Hypo h;
          h.col = mel_template_column(tok, po, tilt, cfg);
          h.norm_sq = 0.0f;
          for (float v : h.col) h.norm_sq += v * v;
          h.norm_sq *= static_cast<float>(w);
          hypos[static_cast<size_t>(tok)].push_back(std::move(h));
        }
    }
  }

  const float* p = mel.data();
  std::vector<int> out;
  out.reserve(static_cast<size_t>(n_syl));
  std::vector<double> row_sum(static_cast<size_t>(f));
  for (int k = 0; k < n_syl; ++k) {
    double win_sq = 0.0;
    for (int r = 0; r < f; ++r) {
      double s = 0.0;
      for (int c = 0; c < w; ++c) {
        const double v = p[static_cast<size_t>(r) * m + k * w + c];
        s += v;
        win_sq += v * v;
      }
      row_sum[static_cast<size_t>(r)] = s;
    }
    int best_tok = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int tok = 0; tok < kSyllables; ++tok) {
      for (const Hypo& h : hypos[static_cast<size_t>(tok)]) {
        // ||window - tpl||^2 = ||window||^2 - 2<window,tpl> + ||tpl||^2
        double cross = 0.0;
        for (int r = 0; r < f; ++r) cross += row_sum[static_cast<size_t>(r)] * h.col[static_cast<size_t>(r)];
        const double dist = win_sq - 2.0 * cross + h.norm_sq;
        if (dist < best_dist) {  // strict: ties keep the lowest token id
          best_dist = dist;
          best_tok = tok;
        }
      }
    }
    out.push_back(best_tok);
  }
  return out;
}

// ---------------------------------------------------------------------------
// frame rendering
// ---------------------------------------------------------------------------

namespace {

struct Canvas {
  float* data;
  int h, w;
  void splat(int y, int x, float v) {
    if (y >= 0 && y < h && x >= 0 && x < w) {
      float& px = data[static_cast<size_t>(y) * w + x];
      px = std::max(px, v);
    }
  }
};

// thick line segment from (y0,x0) to (y1,x1)
void draw_segment(Canvas cv, float y0, float x0, float y1, float x1, float thickness, float amp) {
  const int steps = 2 * std::max(cv.h, cv.w);
  const int rad = std::max(0, static_cast<int>(thickness));
  for (int s = 0; s <= steps; ++s) {
    const float t = static_cast<float>(s) / steps;
    const float y = y0 + t * (y1 - y0);
    const float x = x0 + t * (x1 - x0);
    for (int dy = -rad; dy <= rad; ++dy)
      for (int dx = -rad; dx <= rad; ++dx)
        if (dy * dy + dx * dx <= static_cast<int>(thickness * thickness))
          cv.splat(static_cast<int>(std::lround(y)) + dy, static_cast<int>(std::lround(x)) + dx, amp);
  }
}

// the eight hand-shape glyphs: simple stroke patterns around (cy,cx)
void draw_hand_glyph(Canvas cv, int shape, float cy, float cx, float scale, float thickness) {
  const float r = 5.0f * scale;
  switch (shape) {
    case 1: draw_segment(cv, cy - r, cx, cy + r, cx, thickness, 1.0f); break;
    case 2: draw_segment(cv, cy, cx - r, cy, cx + r, thickness, 1.0f); break;
    case 3: draw_segment(cv, cy - r, cx - r, cy + r, cx + r, thickness, 1.0f); break;
    case 4: draw_segment(cv, cy + r, cx - r, cy - r, cx + r, thickness, 1.0f); break;
    case 5:
      draw_segment(cv, cy - r, cx, cy + r, cx, thickness, 1.0f);
      draw_segment(cv, cy, cx - r, cy, cx + r, thickness, 1.0f);
      break;
    case 6:
      draw_segment(cv, cy - r, cx - r, cy + r, cx + r, thickness, 1.0f);
      draw_segment(cv, cy + r, cx - r, cy - r, cx + r, thickness, 1.0f);
      break;
    case 7:
      draw_segment(cv, cy - r, cx - r, cy - r, cx + r, thickness, 1.0f);
      draw_segment(cv, cy + r, cx - r, cy + r, cx + r, thickness, 1.0f);
      draw_segment(cv, cy - r, cx - r, cy + r, cx - r, thickness, 1.0f);
      draw_segment(cv, cy - r, cx + r, cy + r, cx + r, thickness, 1.0f);
      break;
    case 8:
      for (int dy = -static_cast<int>(r); dy <= static_cast<int>(r); ++dy)
        for (int dx = -static_cast<int>(r); dx <= static_cast<int>(r); ++dx)
          if (dy * dy + dx * dx <= r * r)
            cv.splat(static_cast<int>(std::lround(cy)) + dy, static_cast<int>(std::lround(cx)) + dx, 1.0f);
      break;
    default: throw std::invalid_argument("hand shape out of range: " + std::to_string(shape));
  }
}

// lip ellipse outline: aspect ratio encodes the vowel position, stroke
// thickness encodes the consonant shape
void draw_lip_glyph(Canvas cv, const CueCode& code, float cy, float cx, float scale) {
  const float rx = 6.0f * scale;
  const float ry = rx * (0.25f + 0.14f * static_cast<float>(code.vowel_position - 1));
  const float band = 0.10f + 0.055f * static_cast<float>(code.consonant_shape);
  const int by = static_cast<int>(ry + 2), bx = static_cast<int>(rx + 2);
  for (int dy = -by; dy <= by; ++dy)
    for (int dx = -bx; dx <= bx; ++dx) {
      const float e = (dx / rx) * (dx / rx) + (dy / std::max(ry, 1.0f)) * (dy / std::max(ry, 1.0f));
      if (std::abs(e - 1.0f) < band)
        cv.splat(static_cast<int>(std::lround(cy)) + dy, static_cast<int>(std::lround(cx)) + dx, 1.0f);
    }
}

void draw_gaussian(Canvas cv, float cy, float cx, float sigma, float amp) {
  const int rad = static_cast<int>(3.0f * sigma + 1.0f);
  for (int dy = -rad; dy <= rad; ++dy)
    for (int dx = -rad; dx <= rad; ++dx) {
      const float d2 = static_cast<float>(dy * dy + dx * dx);
      const float v = amp * std::exp(-d2 / (2.0f * sigma * sigma));
      if (v > 1e-4f) cv.splat(static_cast<int>(std::lround(cy)) + dy, static_cast<int>(std::lround(cx)) + dx, v);
    }
}

// fixed canvas anchors for the five hand positions, (row, col) fractions
constexpr float kHandAnchors[kHandPositions][2] = {
    {0.25f, 0.22f}, {0.25f, 0.78f}, {0.50f, 0.50f}, {0.72f, 0.22f}, {0.72f, 0.78f}};
constexpr float kMouthAnchor[2] = {0.82f, 0.50f};

}  // namespace

Sample render_sample(const std::vector<int>& tokens, const CuerProfile& cuer, uint64_t seed,
                     const CorpusConfig& cfg) {
  if (tokens.empty()) throw std::invalid_argument("render_sample: empty token sequence");
  for (int t : tokens) CueCode::from_token(t);  // validates
  if (cfg.hand_lead < 0 || cfg.hand_lead >= cfg.frames_per_syllable)
    throw std::invalid_argument("render_sample: hand_lead must lie in [0, frames_per_syllable)");

  const int fps = cfg.frames_per_syllable;
  const int t_total = static_cast<int>(tokens.size()) * fps;
  const int h = cfg.height, w = cfg.width;
  const size_t plane = static_cast<size_t>(h) * w;

  Sample s;
  s.tokens = tokens;
  s.cuer = cuer;
  s.video = Tensor<float>({t_total, 3, h, w});
  s.pose = Tensor<float>({t_total, 3, h, w});

  auto channel = [&](Tensor<float>& t, int frame, int c) {
    return Canvas{t.data() + (static_cast<size_t>(frame) * 3 + c) * plane, h, w};
  };

  for (size_t k = 0; k < tokens.size(); ++k) {
    const CueCode code = CueCode::from_token(tokens[k]);
    const float hand_y = kHandAnchors[code.vowel_position - 1][0] * (h - 1);
    const float hand_x = kHandAnchors[code.vowel_position - 1][1] * (w - 1);
    const float mouth_y = kMouthAnchor[0] * (h - 1);
    const float mouth_x = kMouthAnchor[1] * (w - 1);
    const int slot0 = static_cast<int>(k) * fps;
    // within each syllable slot the hand occupies the leading frames and the
    // lips the trailing ones, so the k-th hand onset precedes the k-th lip
    // onset by exactly hand_lead frames
    const int hand_begin = slot0;
    const int hand_end = slot0 + fps - cfg.hand_lead;
    const int lip_begin = slot0 + cfg.hand_lead;
    const int lip_end = slot0 + fps;
    for (int f = hand_begin; f < hand_end; ++f) {
      draw_hand_glyph(channel(s.video, f, 0), code.consonant_shape, hand_y, hand_x, cuer.glyph_scale,
                      cuer.glyph_thickness);
      draw_hand_glyph(channel(s.video, f, 2), code.consonant_shape, hand_y, hand_x, cuer.glyph_scale,
                      0.6f * cuer.glyph_thickness);
      draw_gaussian(channel(s.pose, f, 0), hand_y, hand_x, 2.0f * cuer.glyph_scale, 1.0f);
    }
    for (int f = lip_begin; f < lip_end; ++f) {
      draw_lip_glyph(channel(s.video, f, 1), code, mouth_y, mouth_x, cuer.glyph_scale);
      draw_gaussian(channel(s.pose, f, 1), mouth_y, mouth_x, 1.5f, 1.0f);
    }
  }

  if (cfg.noise_amplitude > 0.0f) {
    Rng rng(seed);
    for (auto* t : {&s.video, &s.pose}) {
      float* p = t->data();
      const size_t n = t->numel();
      for (size_t i = 0; i < n; ++i) p[i] += cfg.noise_amplitude * static_cast<float>(rng.normal());
    }
  }

  s.mel = synth_mel(tokens, cuer, cfg);
  return s;
}

// ---------------------------------------------------------------------------
// corpus generation
// ---------------------------------------------------------------------------

CorpusSplits generate_corpus(const GenerateSpec& spec) {
  if (spec.n_sentences < 2) throw std::invalid_argument("generate_corpus: need at least 2 sentences");
  if (spec.len_min < 1 || spec.len_max < spec.len_min)
    throw std::invalid_argument("generate_corpus: invalid length range");
  if (spec.n_cuers < 1) throw std::invalid_argument("generate_corpus: need at least one cuer");

  // enough unique sentences must exist
  double unique_capacity = 0.0;
  for (int len = spec.len_min; len <= spec.len_max; ++len)
    unique_capacity += std::pow(static_cast<double>(kSyllables), static_cast<double>(len));
  if (unique_capacity < static_cast<double>(spec.n_sentences))
    throw std::invalid_argument("generate_corpus: only " + std::to_string(static_cast<long long>(unique_capacity)) +
                                " unique sentences exist in the requested length range, need " +
                                std::to_string(spec.n_sentences));

  const int n_train = static_cast<int>(std::llround(spec.split_ratio * static_cast<double>(spec.n_sentences)));
  const int n_test = spec.n_sentences - n_train;
  if (n_test < 1 || n_train < 1)
    throw std::invalid_argument("generate_corpus: split ratio " + std::to_string(spec.split_ratio) +
                                " leaves an empty split for " + std::to_string(spec.n_sentences) + " sentences");

  Rng rng(spec.seed);
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> sentences;
  sentences.reserve(static_cast<size_t>(spec.n_sentences));
  while (static_cast<int>(sentences.size()) < spec.n_sentences) {
    const int len = spec.len_min + static_cast<int>(rng.randint(static_cast<uint64_t>(spec.len_max - spec.len_min + 1)));
    std::vector<int> sent(static_cast<size_t>(len));
    for (auto& t : sent) t = static_cast<int>(rng.randint(kSyllables));
    if (seen.insert(sent).second) sentences.push_back(std::move(sent));
  }

  CorpusSplits out;
  out.train.config = spec.config;
  out.train.seed = spec.seed;
  out.test.config = spec.config;
  out.test.seed = spec.seed;
  for (int i = 0; i < spec.n_sentences; ++i) {
    const CuerProfile cuer = make_cuer_profile(static_cast<uint32_t>(rng.randint(static_cast<uint64_t>(spec.n_cuers))));
    const uint64_t sample_seed = rng.next_u64();
    Sample s = render_sample(sentences[static_cast<size_t>(i)], cuer, sample_seed, spec.config);
    (i < n_train ? out.train : out.test).samples.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// file format
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'U', 'N', 'I', 'C', 'U', 'E', 'C', 'S'};
constexpr uint32_t kVersion = 1;

struct ByteWriter {
  std::vector<uint8_t>& out;
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const size_t at = out.size();
    out.resize(at + sizeof(T));
    std::memcpy(out.data() + at, &v, sizeof(T));
  }
  void put_floats(const float* p, size_t n) {
    const size_t at = out.size();
    out.resize(at + n * sizeof(float));
    std::memcpy(out.data() + at, p, n * sizeof(float));
  }
};

struct ByteReader {
  const std::vector<uint8_t>& in;
  size_t pos = 0;
  template <class T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (pos + sizeof(T) > in.size()) throw std::runtime_error("corpus file truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  void get_floats(float* p, size_t n) {
    if (pos + n * sizeof(float) > in.size()) throw std::runtime_error("corpus file truncated");
    std::memcpy(p, in.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);
  }
};

}  // namespace

std::vector<uint8_t> corpus_to_bytes(const Corpus& corpus) {
  std::vector<uint8_t> bytes;
  ByteWriter w{bytes};
  for (char c : kMagic) w.put(c);
  w.put(kVersion);
  w.put(static_cast<uint64_t>(corpus.samples.size()));
  const CorpusConfig& c = corpus.config;
  w.put(static_cast<uint32_t>(c.frames_per_syllable));
  w.put(static_cast<uint32_t>(c.height));
  w.put(static_cast<uint32_t>(c.width));
  w.put(static_cast<uint32_t>(c.mel_rows));
  w.put(static_cast<uint32_t>(c.mel_cols_per_syllable));
  w.put(static_cast<uint32_t>(c.hand_lead));
  w.put(c.noise_amplitude);
  w.put(corpus.seed);
  for (const Sample& s : corpus.samples) {
    w.put(s.cuer.cuer_id);
    w.put(static_cast<int32_t>(s.cuer.pitch_offset));
    w.put(s.cuer.spectral_tilt);
    w.put(s.cuer.glyph_thickness);
    w.put(s.cuer.glyph_scale);
    w.put(static_cast<uint8_t>(s.cuer.hearing_impaired ? 1 : 0));
    w.put(static_cast<uint32_t>(s.tokens.size()));
    for (int t : s.tokens) w.put(static_cast<uint16_t>(t));
    w.put_floats(s.video.data(), s.video.numel());
    w.put_floats(s.pose.data(), s.pose.numel());
    w.put_floats(s.mel.data(), s.mel.numel());
  }
  return bytes;
}

Corpus corpus_from_bytes(const std::vector<uint8_t>& bytes) {
  ByteReader r{bytes};
  for (char c : kMagic)
    if (r.get<char>() != c) throw std::runtime_error("not a corpus file: bad magic");
  const uint32_t version = r.get<uint32_t>();
  if (version != kVersion) throw std::runtime_error("unsupported corpus version " + std::to_string(version));
  const uint64_t count = r.get<uint64_t>();
  Corpus corpus;
  corpus.config.frames_per_syllable = static_cast<int>(r.get<uint32_t>());
  corpus.config.height = static_cast<int>(r.get<uint32_t>());
  corpus.config.width = static_cast<int>(r.get<uint32_t>());
  corpus.config.mel_rows = static_cast<int>(r.get<uint32_t>());
  corpus.config.mel_cols_per_syllable = static_cast<int>(r.get<uint32_t>());
  corpus.config.hand_lead = static_cast<int>(r.get<uint32_t>());
  corpus.config.noise_amplitude = r.get<float>();
  corpus.seed = r.get<uint64_t>();
  corpus.samples.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    Sample s;
    s.cuer.cuer_id = r.get<uint32_t>();
    s.cuer.pitch_offset = static_cast<int>(r.get<int32_t>());
    s.cuer.spectral_tilt = r.get<float>();
    s.cuer.glyph_thickness = r.get<float>();
    s.cuer.glyph_scale = r.get<float>();
    s.cuer.hearing_impaired = r.get<uint8_t>() != 0;
    const uint32_t len = r.get<uint32_t>();
    s.tokens.resize(len);
    for (auto& t : s.tokens) t = static_cast<int>(r.get<uint16_t>());
    const int t_total = static_cast<int>(len) * corpus.config.frames_per_syllable;
    const int m = static_cast<int>(len) * corpus.config.mel_cols_per_syllable;
    s.video = Tensor<float>({t_total, 3, corpus.config.height, corpus.config.width});
    s.pose = Tensor<float>({t_total, 3, corpus.config.height, corpus.config.width});
    s.mel = Tensor<float>({corpus.config.mel_rows, m});
    r.get_floats(s.video.data(), s.video.numel());
    r.get_floats(s.pose.data(), s.pose.numel());
    r.get_floats(s.mel.data(), s.mel.numel());
    corpus.samples.push_back(std::move(s));
  }
  if (r.pos != bytes.size()) throw std::runtime_error("corpus file has trailing bytes");
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::string& path) {
  const std::vector<uint8_t> bytes = corpus_to_bytes(corpus);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("short write to " + path);
}

Corpus read_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return corpus_from_bytes(bytes);
}

}  // namespace unicue
