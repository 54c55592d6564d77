#include "unicue/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace unicue {

namespace {

constexpr char kMagic[10] = {'U', 'N', 'I', 'C', 'U', 'E', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

struct Writer {
  std::vector<uint8_t>& out;
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const size_t at = out.size();
    out.resize(at + sizeof(T));
    std::memcpy(out.data() + at, &v, sizeof(T));
  }
  void put_bytes(const void* p, size_t n) {
    const size_t at = out.size();
    out.resize(at + n);
    std::memcpy(out.data() + at, p, n);
  }
  void put_string(const std::string& s) {
    put(static_cast<uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  void put_blob_map(const std::map<std::string, Blob>& m) {
    put(static_cast<uint32_t>(m.size()));
    for (const auto& [name, blob] : m) {
      put_string(name);
      put(static_cast<uint32_t>(blob.shape.size()));
      for (int d : blob.shape) put(static_cast<uint32_t>(d));
      put_bytes(blob.data.data(), blob.data.size() * sizeof(float));
    }
  }
};

struct Reader {
  const std::vector<uint8_t>& in;
  size_t pos = 0;
  template <class T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string get_string() {
    const uint32_t n = get<uint32_t>();
    if (pos + n > in.size()) throw std::runtime_error("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(in.data() + pos), n);
    pos += n;
    return s;
  }
  std::map<std::string, Blob> get_blob_map() {
    std::map<std::string, Blob> m;
    const uint32_t count = get<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
      const std::string name = get_string();
      Blob b;
      const uint32_t nd = get<uint32_t>();
      size_t numel = 1;
      for (uint32_t d = 0; d < nd; ++d) {
        b.shape.push_back(static_cast<int>(get<uint32_t>()));
        numel *= static_cast<size_t>(b.shape.back());
      }
      if (pos + numel * sizeof(float) > in.size()) throw std::runtime_error("checkpoint truncated");
      b.data.resize(numel);
      std::memcpy(b.data.data(), in.data() + pos, numel * sizeof(float));
      pos += numel * sizeof(float);
      m.emplace(name, std::move(b));
    }
    return m;
  }
};

}  // namespace

std::vector<uint8_t> Checkpoint::to_bytes() const {
  std::vector<uint8_t> bytes;
  Writer w{bytes};
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put(kVersion);
  w.put_string(config_text);
  w.put(step);
  for (uint64_t s : rng_state) w.put(s);
  w.put(adam_step);
  w.put_blob_map(params);
  w.put_blob_map(adam_m);
  w.put_blob_map(adam_v);
  return bytes;
}

Checkpoint Checkpoint::from_bytes(const std::vector<uint8_t>& bytes) {
  Reader r{bytes};
  char magic[10];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw std::runtime_error("not a checkpoint: bad magic");
  const uint32_t version = r.get<uint32_t>();
  if (version != kVersion) throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_text = r.get_string();
  c.step = r.get<uint64_t>();
  for (uint64_t& s : c.rng_state) s = r.get<uint64_t>();
  c.adam_step = r.get<uint64_t>();
  c.params = r.get_blob_map();
  c.adam_m = r.get_blob_map();
  c.adam_v = r.get_blob_map();
  if (r.pos != bytes.size()) throw std::runtime_error("checkpoint has trailing bytes");
  return c;
}

void Checkpoint::save(const std::string& path) const {
  const auto bytes = to_bytes();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("short write to " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_bytes(bytes);
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  for (const auto& [name, blob] : params)
    if (name.rfind(prefix, 0) == 0) return true;
  return false;
}

void store_params(Checkpoint& ckpt, const ParamList<float>& params) {
  for (const auto& p : params) {
    Blob b;
    b.shape = p.tensor.shape();
    b.data = p.tensor.values();
    ckpt.params[p.name] = std::move(b);
  }
}

void load_params(const Checkpoint& ckpt, const ParamList<float>& params) {
  for (const auto& p : params) {
    const auto it = ckpt.params.find(p.name);
    if (it == ckpt.params.end()) throw std::runtime_error("checkpoint missing parameter '" + p.name + "'");
    if (it->second.shape != p.tensor.shape())
      throw std::runtime_error("checkpoint parameter '" + p.name + "' has shape " + shape_str(it->second.shape) +
                               ", model expects " + shape_str(p.tensor.shape()));
    Tensor<float> t = p.tensor;  // shares storage
    std::copy(it->second.data.begin(), it->second.data.end(), t.values().begin());
  }
}

}  // namespace unicue
