#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "unicue/layers.hpp"

// Versioned binary checkpoint: config echo, step counter, RNG state, a
// named-blob directory of parameters and the Adam moments. Loading restores
// training bit-identically.

namespace unicue {

struct Blob {
  Shape shape;
  std::vector<float> data;

  bool operator==(const Blob&) const = default;
};

struct Checkpoint {
  std::string config_text;
  uint64_t step = 0;
  std::array<uint64_t, 4> rng_state{};
  uint64_t adam_step = 0;
  std::map<std::string, Blob> params;
  std::map<std::string, Blob> adam_m;
  std::map<std::string, Blob> adam_v;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  std::vector<uint8_t> to_bytes() const;
  static Checkpoint from_bytes(const std::vector<uint8_t>& bytes);

  bool has_prefix(const std::string& prefix) const;
};

// snapshot / restore parameter lists by name
void store_params(Checkpoint& ckpt, const ParamList<float>& params);
void load_params(const Checkpoint& ckpt, const ParamList<float>& params);

}  // namespace unicue
