#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "wadn/error.hpp"
#include "wadn/rng.hpp"
#include "wadn/vocab.hpp"

namespace wadn {

struct Example {
  std::size_t label = 0;
  std::string text;
};

using Dataset = std::vector<Example>;

// ---------------------------------------------------------------------------
// Listops

struct ListopsSpec {
  std::size_t max_depth = 3;
  std::size_t max_args = 5;
  std::size_t max_length = 256;  // characters of expression text
  std::size_t count = 1000;

  void validate() const {
    if (max_depth == 0) throw ConfigError("max_depth must be positive");
    if (max_args < 2) throw ConfigError("max_args must be at least 2");
    if (max_length < 8) throw ConfigError("max_length too small for any expression");
    if (count == 0) throw ConfigError("count must be positive");
  }
};

namespace detail {

inline const char* kListopsOps[4] = {"MAX", "MIN", "MED", "SM"};

inline int apply_listops(const std::string& op, const std::vector<int>& args) {
  if (op == "MAX") return *std::max_element(args.begin(), args.end());
  if (op == "MIN") return *std::min_element(args.begin(), args.end());
  if (op == "MED") {
    std::vector<int> sorted = args;
    std::sort(sorted.begin(), sorted.end());
    return sorted[(sorted.size() - 1) / 2];  // lower middle on even arity
  }
  if (op == "SM") {
    int s = 0;
    for (int a : args) s += a;
    return s % 10;
  }
  throw ParseError("unknown operator " + op);
}

struct ListopsParser {
  const std::string& text;
  std::size_t pos = 0;

  explicit ListopsParser(const std::string& t) : text(t) {}

  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(msg + " at position " + std::to_string(pos));
  }
  void skip_spaces() {
    while (pos < text.size() && text[pos] == ' ') ++pos;
  }
  std::string next_token() {
    skip_spaces();
    if (pos >= text.size()) fail("unexpected end of expression");
    std::size_t start = pos;
    while (pos < text.size() && text[pos] != ' ') ++pos;
    return text.substr(start, pos - start);
  }

  int parse_value() {
    std::string tok = next_token();
    if (tok == "[") fail("operator must follow '[' without a space");
    if (tok.size() == 1 && tok[0] >= '0' && tok[0] <= '9') return tok[0] - '0';
    if (tok[0] == '[') {
      std::string op = tok.substr(1);
      bool known = false;
      for (const char* k : kListopsOps) known = known || op == k;
      if (!known) fail("unknown operator " + op);
      std::vector<int> args;
      while (true) {
        skip_spaces();
        if (pos >= text.size()) fail("missing ']'");
        if (text[pos] == ']') {
          ++pos;
          break;
        }
        args.push_back(parse_value());
      }
      if (args.empty()) fail("operator " + op + " has no arguments");
      return apply_listops(op, args);
    }
    fail("unexpected token \"" + tok + "\"");
  }
};

}  // namespace detail

/// Evaluates a bracketed Listops expression like "[MAX 2 9 [MIN 4 7 ] 0 ]".
/// Always yields a digit in [0, 9].
inline int eval_listops(const std::string& expression) {
  detail::ListopsParser p(expression);
  int v = p.parse_value();
  p.skip_spaces();
  if (p.pos != expression.size()) p.fail("trailing input");
  return v;
}

namespace detail {

inline void gen_listops_expr(Rng& rng, std::size_t depth_left, std::size_t max_args,
                             std::string& out, bool force_op = false) {
  bool leaf = depth_left == 0 || (!force_op && rng.uniform() < 0.35);
  if (leaf) {
    out += static_cast<char>('0' + rng.uniform_index(10));
    return;
  }
  out += '[';
  out += kListopsOps[rng.uniform_index(4)];
  std::size_t args = 2 + rng.uniform_index(max_args - 1);
  for (std::size_t i = 0; i < args; ++i) {
    out += ' ';
    gen_listops_expr(rng, depth_left - 1, max_args, out);
  }
  out += " ]";
}

}  // namespace detail

/// Generates labeled Listops expressions. Labels come from the evaluator, so
/// they are correct by construction; the test suite still re-derives them with
/// an independent interpreter.
inline Dataset gen_listops(const ListopsSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, "listops"));
  Dataset out;
  out.reserve(spec.count);
  while (out.size() < spec.count) {
    std::string expr;
    int tries = 0;
    for (;; ++tries) {
      if (tries >= 64)
        throw ContractError("could not generate an expression within " +
                            std::to_string(spec.max_length) + " characters");
      expr.clear();
      detail::gen_listops_expr(rng, spec.max_depth, spec.max_args, expr, true);
      if (expr.size() <= spec.max_length) break;
    }
    Example e;
    e.text = expr;
    e.label = static_cast<std::size_t>(eval_listops(expr));
    out.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tokenization

enum class TokenMode { Byte, Word };

struct Vocab {
  std::unordered_map<std::string, std::size_t> word_to_id;
  std::vector<std::string> id_to_word;  // index 0..NUM_SPECIALS-1 reserved

  std::size_t size() const { return NUM_SPECIALS + id_to_word.size(); }
  std::size_t lookup(const std::string& w) const {
    auto it = word_to_id.find(w);
    return it == word_to_id.end() ? UNK_ID : it->second;
  }
};

/// Frequency-ranked vocabulary over whitespace-split corpus lines; ties break
/// lexicographically so rebuilds are stable.
inline Vocab build_vocab(const std::vector<std::string>& lines, std::size_t max_size) {
  if (max_size < NUM_SPECIALS + 1)
    throw ConfigError("max_size must be at least " + std::to_string(NUM_SPECIALS + 1));
  std::map<std::string, std::size_t> freq;
  for (const std::string& line : lines) {
    std::istringstream words(line);
    std::string w;
    while (words >> w) ++freq[w];
  }
  if (freq.empty()) throw ConfigError("empty corpus");

  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [word, n] : ranked) {
    (void)n;
    if (v.size() >= max_size) break;
    v.word_to_id.emplace(word, v.size());
    v.id_to_word.push_back(word);
  }
  return v;
}

/// CLS first, then byte values (offset past the specials) or vocab ids,
/// truncated or PAD-filled to exactly `seq_len` ids.
inline std::vector<std::size_t> tokenize(const std::string& text, TokenMode mode,
                                         const Vocab* vocab, std::size_t seq_len) {
  if (seq_len == 0) throw ConfigError("seq_len must be positive");
  if (mode == TokenMode::Word && vocab == nullptr)
    throw ConfigError("word tokenization requires a vocab");
  std::vector<std::size_t> ids;
  ids.reserve(seq_len);
  ids.push_back(CLS_ID);
  if (mode == TokenMode::Byte) {
    for (unsigned char b : text) {
      if (ids.size() == seq_len) break;
      ids.push_back(NUM_SPECIALS + b);
    }
  } else {
    std::istringstream words(text);
    std::string w;
    while (ids.size() < seq_len && words >> w) ids.push_back(vocab->lookup(w));
  }
  ids.resize(seq_len, PAD_ID);
  return ids;
}

/// Inverse of byte-mode tokenize for the ids that carry text.
inline std::string detokenize_bytes(const std::vector<std::size_t>& ids) {
  std::string out;
  for (std::size_t id : ids) {
    if (id < NUM_SPECIALS) continue;
    if (id >= NUM_SPECIALS + 256) throw IndexError("id " + std::to_string(id) + " is not a byte");
    out += static_cast<char>(id - NUM_SPECIALS);
  }
  return out;
}

inline constexpr std::size_t byte_vocab_size() { return NUM_SPECIALS + 256; }

// ---------------------------------------------------------------------------
// Dataset files and batching

inline void save_tsv(const Dataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const Example& e : data) out << e.label << '\t' << e.text << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline Dataset load_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected label<TAB>text");
    Example e;
    std::size_t consumed = 0;
    try {
      e.label = std::stoul(line.substr(0, tab), &consumed);
    } catch (const std::exception&) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": label is not a number");
    }
    if (consumed != tab)
      throw ParseError(path + ":" + std::to_string(lineno) + ": label is not a number");
    e.text = line.substr(tab + 1);
    out.push_back(std::move(e));
  }
  return out;
}

/// Deterministic head/tail split; `val_fraction` of the shuffled data becomes
/// the validation set.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& data, double val_fraction,
                                                 std::uint64_t seed) {
  if (val_fraction < 0.0 || val_fraction >= 1.0)
    throw ConfigError("val_fraction must be in [0, 1)");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  shuffle(order, rng);
  std::size_t val_n = static_cast<std::size_t>(static_cast<double>(data.size()) * val_fraction);
  Dataset train, val;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < val_n ? val : train).push_back(data[order[i]]);
  return {std::move(train), std::move(val)};
}

struct Batch {
  std::vector<std::size_t> indices;  // rows of the dataset, post-shuffle
};

/// Index batches for one epoch: a seeded shuffle of the whole dataset, cut
/// into batch_size pieces with the short remainder kept.
inline std::vector<Batch> batch_iter(std::size_t dataset_size, std::size_t batch_size,
                                     std::uint64_t seed, std::size_t epoch) {
  if (dataset_size == 0) throw ConfigError("empty dataset");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<std::size_t> order(dataset_size);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, "epoch" + std::to_string(epoch)));
  shuffle(order, rng);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < dataset_size; start += batch_size) {
    Batch b;
    std::size_t end = std::min(dataset_size, start + batch_size);
    b.indices.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace wadn
