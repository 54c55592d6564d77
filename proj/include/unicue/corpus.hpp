#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "unicue/rng.hpp"
#include "unicue/tensor.hpp"

// Procedural cued-speech corpus: paired video frames, pose heatmaps, syllable
// transcripts and mel-spectrograms. The coding chart is 8 hand shapes x 5
// hand positions; hand cues lead lip cues by a configurable frame offset.

namespace unicue {

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

inline constexpr int kHandShapes = 8;
inline constexpr int kHandPositions = 5;
inline constexpr int kSyllables = kHandShapes * kHandPositions;  // 40
inline constexpr int kPadId = 40;
inline constexpr int kBosId = 41;
inline constexpr int kEosId = 42;
inline constexpr int kVocabSize = 43;

struct CueCode {
  int consonant_shape = 1;  // 1..8
  int vowel_position = 1;   // 1..5

  int token_id() const { return (consonant_shape - 1) * kHandPositions + (vowel_position - 1); }
  static CueCode from_token(int id);
};

// ---------------------------------------------------------------------------
// cuer profiles
// ---------------------------------------------------------------------------

// The admissible profile grid is finite so mel decoding can enumerate it.
inline constexpr int kPitchOffsetMin = -3;
inline constexpr int kPitchOffsetMax = 3;
inline const std::vector<float> kAdmissibleTilts = {-0.10f, -0.05f, 0.0f, 0.05f, 0.10f};

struct CuerProfile {
  uint32_t cuer_id = 0;
  int pitch_offset = 0;        // mel-row shift, -3..3
  float spectral_tilt = 0.0f;  // per-row gain slope, one of kAdmissibleTilts
  float glyph_thickness = 1.0f;
  float glyph_scale = 1.0f;
  bool hearing_impaired = false;  // metadata only

  bool operator==(const CuerProfile&) const = default;
};

// Deterministic profile table; distinct ids give distinct
// (pitch_offset, spectral_tilt) pairs for id < 35, and distinct render
// styles for id < 12, which identify the cuer visually.
CuerProfile make_cuer_profile(uint32_t id);

// ---------------------------------------------------------------------------
// corpus configuration and samples
// ---------------------------------------------------------------------------

struct CorpusConfig {
  int height = 32;
  int width = 32;
  int frames_per_syllable = 6;
  int hand_lead = 2;  // frames the hand cue precedes the lip cue
  int mel_rows = 32;
  int mel_cols_per_syllable = 8;
  float noise_amplitude = 0.05f;
};

struct Sample {
  Tensor<float> video;  // (T,3,H,W)
  Tensor<float> pose;   // (T,3,H,W)
  std::vector<int> tokens;
  Tensor<float> mel;  // (F,M)
  CuerProfile cuer;
};

struct Corpus {
  CorpusConfig config;
  uint64_t seed = 0;
  std::vector<Sample> samples;
};

// ---------------------------------------------------------------------------
// rendering and mel synthesis
// ---------------------------------------------------------------------------

// Video + pose + mel for one sentence. Deterministic given (tokens, cuer, seed).
Sample render_sample(const std::vector<int>& tokens, const CuerProfile& cuer, uint64_t seed,
                     const CorpusConfig& cfg = {});

// Per-token mel template column, length F. Bands sit at rows
// 2*shape + pitch_offset and 20 + 2*position + pitch_offset; rows falling
// off the grid are dropped. A per-row gain ramp of slope spectral_tilt is
// applied on top, and everything is normalized into [0,1].
std::vector<float> mel_template_column(int token, int pitch_offset, float spectral_tilt,
                                       const CorpusConfig& cfg = {});

Tensor<float> synth_mel(const std::vector<int>& tokens, const CuerProfile& cuer, const CorpusConfig& cfg = {});

// Nearest-template decoding per syllable window. With a hint only that
// profile is searched; otherwise the full admissible grid is. Ties break
// toward the lowest token id.
std::vector<int> decode_mel(const Tensor<float>& mel, const std::optional<CuerProfile>& cuer_hint,
                            const CorpusConfig& cfg = {});

// all-zero mel column used to pad variable-length mels to a fixed width
inline float mel_silence_value() { return 0.0f; }

// ---------------------------------------------------------------------------
// corpus generation and file format
// ---------------------------------------------------------------------------

struct GenerateSpec {
  int n_sentences = 64;
  int len_min = 2;
  int len_max = 4;
  int n_cuers = 4;
  double split_ratio = 0.95;  // train fraction
  uint64_t seed = 7;
  CorpusConfig config;
};

struct CorpusSplits {
  Corpus train;
  Corpus test;
};

// Unique sentences drawn uniformly over the syllable vocabulary; the split
// is deterministic and no sentence is shared across splits.
CorpusSplits generate_corpus(const GenerateSpec& spec);

// Binary corpus file: magic "UNICUECS", version, counts, shape header, seed,
// then per-sample cuer record, token ids (u16) and float32 buffers. The
// format is little-endian and round-trips bit-identically.
void write_corpus(const Corpus& corpus, const std::string& path);
Corpus read_corpus(const std::string& path);

std::vector<uint8_t> corpus_to_bytes(const Corpus& corpus);
Corpus corpus_from_bytes(const std::vector<uint8_t>& bytes);

}  // namespace unicue
