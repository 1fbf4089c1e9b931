#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wadn/attention.hpp"
#include "wadn/error.hpp"
#include "wadn/model.hpp"

namespace wadn {

using json = nlohmann::json;

namespace detail {

inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (item.key() == k) { known = true; break; }
    if (!known) throw ConfigError("unknown key \"" + item.key() + "\" in " + where);
  }
}

inline std::uint64_t get_count(const json& j, const char* key, std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_integer() && !v.is_number_unsigned())
    throw ConfigError(std::string(key) + " must be an integer");
  if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
    throw ConfigError(std::string(key) + " must be nonnegative");
  return v.get<std::uint64_t>();
}

inline std::string get_string(const json& j, const char* key, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_string()) throw ConfigError(std::string(key) + " must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline json attention_to_json(const AttentionConfig& a) {
  json j;
  j["kind"] = kind_name(a.kind);
  j["window"] = a.window;
  j["block"] = a.block;
  j["stride"] = a.stride;
  j["rank"] = a.rank;
  j["features"] = a.features;
  j["sinkhorn_iters"] = a.sinkhorn_iters;
  j["seed"] = a.seed;
  if (!a.mixed_kinds.empty()) {
    json arr = json::array();
    for (AttentionKind k : a.mixed_kinds) arr.push_back(kind_name(k));
    j["mixed_kinds"] = arr;
  }
  return j;
}

inline AttentionConfig attention_from_json(const json& j) {
  detail::reject_unknown_keys(j, {"kind", "window", "block", "stride", "rank", "features",
                                  "sinkhorn_iters", "seed", "mixed_kinds"},
                              "attention");
  AttentionConfig a;
  a.kind = kind_from_string(detail::get_string(j, "kind", kind_name(a.kind)));
  a.window = detail::get_count(j, "window", a.window);
  a.block = detail::get_count(j, "block", a.block);
  a.stride = detail::get_count(j, "stride", a.stride);
  a.rank = detail::get_count(j, "rank", a.rank);
  a.features = detail::get_count(j, "features", a.features);
  a.sinkhorn_iters = detail::get_count(j, "sinkhorn_iters", a.sinkhorn_iters);
  a.seed = detail::get_count(j, "seed", a.seed);
  if (j.contains("mixed_kinds")) {
    const json& arr = j.at("mixed_kinds");
    if (!arr.is_array()) throw ConfigError("mixed_kinds must be an array of kind names");
    for (const json& v : arr) {
      if (!v.is_string()) throw ConfigError("mixed_kinds entries must be strings");
      a.mixed_kinds.push_back(kind_from_string(v.get<std::string>()));
    }
  }
  return a;
}

inline json model_config_to_json(const ModelConfig& c) {
  json j;
  j["layers"] = c.ratio.layers;
  j["heads"] = c.ratio.heads;
  j["embed_dim"] = c.embed_dim;
  j["head_dim"] = c.head_dim;
  j["ffn_dim"] = c.ffn_dim;
  j["seq_len"] = c.seq_len;
  j["vocab_size"] = c.vocab_size;
  j["num_classes"] = c.num_classes;
  j["pooling"] = pooling_name(c.pooling);
  j["attention"] = attention_to_json(c.attention);
  return j;
}

inline ModelConfig model_config_from_json(const json& j) {
  detail::reject_unknown_keys(j, {"layers", "heads", "embed_dim", "head_dim", "ffn_dim",
                                  "seq_len", "vocab_size", "num_classes", "pooling", "attention"},
                              "model config");
  ModelConfig c;
  c.ratio.layers = detail::get_count(j, "layers", c.ratio.layers);
  c.ratio.heads = detail::get_count(j, "heads", c.ratio.heads);
  c.embed_dim = detail::get_count(j, "embed_dim", c.embed_dim);
  c.head_dim = detail::get_count(j, "head_dim", c.head_dim);
  c.ffn_dim = detail::get_count(j, "ffn_dim", c.ffn_dim);
  c.seq_len = detail::get_count(j, "seq_len", c.seq_len);
  c.vocab_size = detail::get_count(j, "vocab_size", c.vocab_size);
  c.num_classes = detail::get_count(j, "num_classes", c.num_classes);
  if (j.contains("attention")) c.attention = attention_from_json(j.at("attention"));
  c.pooling = pooling_from_string(
      detail::get_string(j, "pooling", c.pools_by_mean() ? "mean" : "cls"));
  return c;
}

/// Key-sorted single-line dump; equal configs give equal strings.
inline std::string canonical_config_string(const ModelConfig& c) {
  return model_config_to_json(c).dump();
}

inline json parse_json_text(const std::string& text, const std::string& what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ParseError("invalid JSON in " + what);
  return j;
}

inline json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_json_text(buf.str(), path);
}

}  // namespace wadn
