#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "wadn/config_json.hpp"
#include "wadn/data.hpp"
#include "wadn/model.hpp"
#include "wadn/train.hpp"

namespace wadn {

struct TraceDocument {
  std::vector<std::string> tokens;
  std::size_t predicted_class = 0;
  std::vector<double> probs;
  // layers[l][h] is a T x T row-major matrix, T = tokens.size().
  std::vector<std::vector<std::vector<double>>> layers;
  std::size_t side = 0;
};

namespace detail {

inline std::string token_text(std::size_t id, TokenMode mode, const Vocab* vocab) {
  if (id == CLS_ID) return "[CLS]";
  if (id == PAD_ID) return "[PAD]";
  if (id == UNK_ID) return "[UNK]";
  if (mode == TokenMode::Byte) {
    unsigned char b = static_cast<unsigned char>(id - NUM_SPECIALS);
    if (b >= 0x20 && b < 0x7f) return std::string(1, static_cast<char>(b));
    char buf[8];
    std::snprintf(buf, sizeof buf, "\\x%02x", b);
    return buf;
  }
  std::size_t w = id - NUM_SPECIALS;
  if (vocab == nullptr || w >= vocab->id_to_word.size())
    throw IndexError("word id " + std::to_string(id) + " outside the vocab");
  return vocab->id_to_word[w];
}

inline double round_sig(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return std::strtod(buf, nullptr);
}

}  // namespace detail

/// Tokenizes, forwards with tracing, and collects per-head weight matrices.
/// Kinds that ignore padding keep the full S x S matrices; everything else is
/// cropped to the unpadded-plus-CLS length. Kernelized kinds need `dense`;
/// the low-rank kind has no position-aligned weights at all.
inline TraceDocument export_trace(Model& m, const std::string& text, TokenMode mode,
                                  const Vocab* vocab = nullptr, bool dense = false) {
  const ModelConfig& cfg = m.config;
  std::vector<std::size_t> ids = tokenize(text, mode, vocab, cfg.seq_len);
  TraceMode trace = dense ? TraceMode::Dense : TraceMode::Exact;
  ForwardResult fwd = model_forward(m, ids, 1, trace);

  std::size_t S = cfg.seq_len;
  std::size_t T = S;
  if (!cfg.pools_by_mean()) {
    T = 0;
    for (std::size_t id : ids)
      if (id != PAD_ID) ++T;
  }

  TraceDocument doc;
  doc.side = T;
  for (std::size_t i = 0; i < T; ++i) doc.tokens.push_back(detail::token_text(ids[i], mode, vocab));

  const std::vector<double>& lg = fwd.logits.data();
  std::size_t C = cfg.num_classes;
  double mx = lg[0];
  for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, lg[j]);
  double sum = 0.0;
  doc.probs.resize(C);
  for (std::size_t j = 0; j < C; ++j) {
    doc.probs[j] = std::exp(lg[j] - mx);
    sum += doc.probs[j];
  }
  for (double& p : doc.probs) p /= sum;
  doc.predicted_class = argmax_lowest(lg.data(), C);

  std::size_t H = cfg.ratio.heads;
  for (const Tensor& w : fwd.layer_weights) {
    std::vector<std::vector<double>> heads;
    for (std::size_t h = 0; h < H; ++h) {
      std::vector<double> mat(T * T);
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t j = 0; j < T; ++j)
          mat[i * T + j] = w.data()[(h * S + i) * S + j];
      heads.push_back(std::move(mat));
    }
    doc.layers.push_back(std::move(heads));
  }
  return doc;
}

/// The document's JSON form; values rounded to `sig_digits` significant digits
/// unless full precision is requested.
inline json trace_to_json(const TraceDocument& doc, bool full_precision = false,
                          int sig_digits = 6) {
  auto shrink = [&](double v) { return full_precision ? v : detail::round_sig(v, sig_digits); };
  json j;
  j["tokens"] = doc.tokens;
  json probs = json::array();
  for (double p : doc.probs) probs.push_back(shrink(p));
  j["prediction"] = {{"class", doc.predicted_class}, {"probs", probs}};
  json layers = json::array();
  std::size_t T = doc.side;
  for (const auto& heads : doc.layers) {
    json layer_heads = json::array();
    for (const auto& mat : heads) {
      json rows = json::array();
      for (std::size_t i = 0; i < T; ++i) {
        json row = json::array();
        for (std::size_t k = 0; k < T; ++k) row.push_back(shrink(mat[i * T + k]));
        rows.push_back(std::move(row));
      }
      layer_heads.push_back(std::move(rows));
    }
    layers.push_back(json{{"heads", std::move(layer_heads)}});
  }
  j["layers"] = std::move(layers);
  return j;
}

struct SaliencyEntry {
  std::size_t head = 0;
  std::size_t token = 0;
  double weight = 0.0;
};

/// Incoming weights of one query row (CLS by default) across a layer's heads,
/// sorted by weight descending with ties kept in token-position order.
inline std::vector<SaliencyEntry> head_saliency(const TraceDocument& doc, std::size_t layer = 0,
                                                std::size_t row = 0) {
  if (layer >= doc.layers.size())
    throw IndexError("layer " + std::to_string(layer) + " out of range");
  if (row >= doc.side) throw IndexError("row " + std::to_string(row) + " out of range");
  std::vector<SaliencyEntry> out;
  const auto& heads = doc.layers[layer];
  for (std::size_t h = 0; h < heads.size(); ++h)
    for (std::size_t t = 0; t < doc.side; ++t)
      out.push_back({h, t, heads[h][row * doc.side + t]});
  std::stable_sort(out.begin(), out.end(),
                   [](const SaliencyEntry& a, const SaliencyEntry& b) { return a.weight > b.weight; });
  return out;
}

}  // namespace wadn
