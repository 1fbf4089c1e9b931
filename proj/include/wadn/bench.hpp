#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "wadn/checkpoint.hpp"
#include "wadn/model.hpp"
#include "wadn/rng.hpp"

namespace wadn {

inline std::string config_id(const ModelConfig& c) {
  std::ostringstream out;
  out << kind_name(c.attention.kind) << "_L" << c.ratio.layers << "H" << c.ratio.heads;
  return out.str();
}

struct LatencyReport {
  std::string config;
  std::size_t repeats = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
  int threads = 1;
};

/// A full-length batch-1 input: CLS first, then seeded random non-special ids,
/// no padding.
inline std::vector<std::size_t> bench_input(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "bench_input"));
  std::vector<std::size_t> ids(c.seq_len);
  ids[0] = CLS_ID;
  for (std::size_t i = 1; i < ids.size(); ++i)
    ids[i] = NUM_SPECIALS + rng.uniform_index(c.vocab_size - NUM_SPECIALS);
  return ids;
}

/// Times repeated single-input forwards after untimed warmups, gradients and
/// tracing off, on a fixed thread count.
inline LatencyReport measure_latency(Model& m, std::size_t repeats = 100,
                                     std::size_t warmup_runs = 5, std::uint64_t seed = 0,
                                     int threads = 1) {
  if (repeats < 1) throw ConfigError("repeats must be at least 1");
  set_compute_threads(threads);
  NoGradGuard no_grad;
  std::vector<std::size_t> ids = bench_input(m.config, seed);
  for (std::size_t i = 0; i < warmup_runs; ++i) model_forward(m, ids, 1);

  std::vector<double> ms(repeats);
  for (std::size_t r = 0; r < repeats; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    model_forward(m, ids, 1);
    auto t1 = std::chrono::steady_clock::now();
    ms[r] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }

  LatencyReport rep;
  rep.config = config_id(m.config);
  rep.repeats = repeats;
  rep.threads = threads;
  rep.min_ms = ms[0];
  rep.max_ms = ms[0];
  double sum = 0.0;
  for (double v : ms) {
    sum += v;
    rep.min_ms = std::min(rep.min_ms, v);
    rep.max_ms = std::max(rep.max_ms, v);
  }
  rep.mean_ms = sum / static_cast<double>(repeats);
  double sq = 0.0;
  for (double v : ms) sq += (v - rep.mean_ms) * (v - rep.mean_ms);
  rep.std_ms = std::sqrt(sq / static_cast<double>(repeats));
  return rep;
}

struct SizeReport {
  std::string config;
  std::uint64_t params = 0;
  std::uint64_t bytes = 0;
  double mib = 0.0;
};

inline SizeReport size_report(Model& m) {
  SizeReport r;
  r.config = config_id(m.config);
  r.params = total_param_count(m).total();
  r.bytes = 4 * r.params;
  r.mib = model_size_mib(r.params);
  return r;
}

struct SweepRow {
  std::string kind;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::uint64_t params = 0;
  std::uint64_t attention_params = 0;
  double mib = 0.0;
  double lat_mean_ms = 0.0;
  double lat_std_ms = 0.0;
  double accuracy = 0.0;
  bool has_accuracy = false;
};

/// One row per (kind, ratio): size accounting plus single-input latency.
/// `eval_hook`, when given, supplies the accuracy cell (NaN leaves it empty).
inline std::vector<SweepRow> sweep_report(
    const ModelConfig& base, const std::vector<AttentionKind>& kinds,
    const std::vector<AspectRatio>& grid, std::size_t repeats, std::uint64_t seed,
    int threads = 1, const std::function<double(Model&)>& eval_hook = nullptr) {
  if (kinds.empty() || grid.empty()) throw ConfigError("sweep needs kinds and a grid");
  std::vector<SweepRow> rows;
  for (AttentionKind kind : kinds) {
    for (AspectRatio ratio : grid) {
      ModelConfig cfg = base;
      cfg.attention.kind = kind;
      cfg.ratio = ratio;
      cfg.pooling = cfg.pools_by_mean() ? Pooling::Mean : Pooling::CLS;
      Model m = build_model(cfg, derive_seed(seed, config_id(cfg)));

      SweepRow row;
      row.kind = kind_name(kind);
      row.layers = ratio.layers;
      row.heads = ratio.heads;
      ParamBreakdown b = total_param_count(m);
      row.params = b.total();
      row.attention_params = b.attention_core;
      row.mib = model_size_mib(row.params);
      LatencyReport lat = measure_latency(m, repeats, 5, seed, threads);
      row.lat_mean_ms = lat.mean_ms;
      row.lat_std_ms = lat.std_ms;
      if (eval_hook) {
        double acc = eval_hook(m);
        if (std::isfinite(acc)) {
          row.accuracy = acc;
          row.has_accuracy = true;
        }
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "kind,layers,heads,params,mib,lat_mean_ms,lat_std_ms,accuracy\n";
  for (const SweepRow& r : rows) {
    out << r.kind << ',' << r.layers << ',' << r.heads << ',' << r.params << ',' << r.mib << ','
        << r.lat_mean_ms << ',' << r.lat_std_ms << ',';
    if (r.has_accuracy) out << r.accuracy;
    out << '\n';
  }
  return out.str();
}

}  // namespace wadn
