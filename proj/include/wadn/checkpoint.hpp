#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "wadn/config_json.hpp"
#include "wadn/error.hpp"
#include "wadn/model.hpp"

namespace wadn {

inline constexpr char kCheckpointMagic[4] = {'W', 'A', 'D', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

struct ByteWriter {
  std::vector<unsigned char> bytes;

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
};

struct ByteReader {
  std::ifstream in;
  std::string path;

  void raw(void* dst, std::size_t n) {
    in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
      throw IoError("truncated checkpoint: " + path);
  }
  std::uint32_t u32() {
    unsigned char b[4];
    raw(b, 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    raw(b, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
  }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  std::string str() {
    std::string s(u32(), '\0');
    if (!s.empty()) raw(s.data(), s.size());
    return s;
  }
};

}  // namespace detail

/// Writes magic, version, the config document, then every tensor (name, shape,
/// float32 payload, little-endian) in visit order. Fixed random buffers are
/// included so a loaded model is complete without replaying initialization.
inline void save_checkpoint(Model& m, const std::string& path) {
  detail::ByteWriter w;
  w.bytes.insert(w.bytes.end(), kCheckpointMagic, kCheckpointMagic + 4);
  w.u32(kCheckpointVersion);
  w.str(canonical_config_string(m.config));

  std::uint32_t count = 0;
  visit_model_params(m, [&](const std::string&, Tensor&, bool) { ++count; });
  w.u32(count);
  visit_model_params(m, [&](const std::string& name, Tensor& t, bool) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f32(v);
  });

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

/// Rebuilds the model from the embedded config and overwrites every tensor
/// from the file. Tensors are matched by name and checked against the built
/// shapes, so a file from a different layout fails loudly.
inline Model load_checkpoint(const std::string& path) {
  detail::ByteReader r;
  r.path = path;
  r.in.open(path, std::ios::binary);
  if (!r.in) throw IoError("cannot open " + path);

  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw ParseError("not a checkpoint file (bad magic): " + path);
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint version mismatch: file has " + std::to_string(version) +
                     ", expected " + std::to_string(kCheckpointVersion));

  ModelConfig config = model_config_from_json(parse_json_text(r.str(), path));
  Model m = build_model(config, 0);

  struct Entry {
    Shape shape;
    std::vector<double> data;
  };
  std::uint32_t count = r.u32();
  std::unordered_map<std::string, Entry> table;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    Shape shape(r.u32());
    for (std::size_t& d : shape) d = r.u64();
    Entry e;
    e.shape = shape;
    e.data.resize(shape_numel(shape));
    for (double& v : e.data) v = r.f32();
    table.emplace(std::move(name), std::move(e));
  }

  std::size_t used = 0;
  visit_model_params(m, [&](const std::string& name, Tensor& t, bool) {
    auto it = table.find(name);
    if (it == table.end()) throw ParseError("checkpoint missing tensor " + name);
    if (it->second.shape != t.shape())
      throw ParseError("checkpoint tensor " + name + " has shape " +
                       shape_str(it->second.shape) + ", expected " + shape_str(t.shape()));
    std::copy(it->second.data.begin(), it->second.data.end(), t.mutable_data().begin());
    ++used;
  });
  if (used != table.size()) throw ParseError("checkpoint holds unexpected extra tensors");
  return m;
}

/// Load with a config the caller already holds; the embedded one must match.
inline Model load_checkpoint(const std::string& path, const ModelConfig& expected) {
  Model m = load_checkpoint(path);
  if (canonical_config_string(m.config) != canonical_config_string(expected))
    throw ConfigError("checkpoint config does not match the requested config");
  return m;
}

inline double model_size_mib(std::uint64_t param_count) {
  return 4.0 * static_cast<double>(param_count) / (1024.0 * 1024.0);
}

}  // namespace wadn
