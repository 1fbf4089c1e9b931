#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "wadn/bench.hpp"
#include "wadn/checkpoint.hpp"
#include "wadn/config_json.hpp"
#include "wadn/data.hpp"
#include "wadn/interpret.hpp"
#include "wadn/model.hpp"
#include "wadn/train.hpp"

namespace {

using wadn::json;

struct RunDoc {
  json model = json::object();
  json train = json::object();
  json data = json::object();
  json out = json::object();
};

RunDoc load_run_doc(const std::string& path) {
  RunDoc doc;
  if (path.empty()) return doc;
  json j = wadn::load_json_file(path);
  wadn::detail::reject_unknown_keys(j, {"model", "train", "data", "out"}, "run config");
  auto grab = [&](const char* key, json& dst) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_object()) throw wadn::ConfigError(std::string(key) + " must be an object");
    dst = j.at(key);
  };
  grab("model", doc.model);
  grab("train", doc.train);
  grab("data", doc.data);
  grab("out", doc.out);
  wadn::detail::reject_unknown_keys(doc.data, {"train", "val", "mode", "val_fraction"}, "data");
  wadn::detail::reject_unknown_keys(doc.out, {"metrics", "checkpoint", "trace", "report"}, "out");
  return doc;
}

// Model dimension flags shared by train/eval/bench/params/attend. Flags beat
// config-file fields.
struct ModelFlags {
  std::size_t layers = 0, heads = 0, embed = 0, head_dim = 0, ffn = 0;
  std::size_t seq_len = 0, vocab = 0, classes = 0;
  std::size_t window = 0, block = 0, stride = 0, rank = 0, features = 0, sinkhorn_iters = 0;
  std::string kind, pooling, mixed;
  CLI::Option *o_layers = nullptr, *o_heads = nullptr, *o_embed = nullptr, *o_head_dim = nullptr,
              *o_ffn = nullptr, *o_seq_len = nullptr, *o_vocab = nullptr, *o_classes = nullptr,
              *o_window = nullptr, *o_block = nullptr, *o_stride = nullptr, *o_rank = nullptr,
              *o_features = nullptr, *o_sinkhorn = nullptr, *o_kind = nullptr,
              *o_pooling = nullptr, *o_mixed = nullptr;

  void add(CLI::App* app) {
    o_layers = app->add_option("--layers", layers, "Encoder layers");
    o_heads = app->add_option("--heads", heads, "Heads per layer");
    o_embed = app->add_option("--embed", embed, "Embedding width E");
    o_head_dim = app->add_option("--head-dim", head_dim, "Per-head width A");
    o_ffn = app->add_option("--ffn", ffn, "Feed-forward width M");
    o_seq_len = app->add_option("--seq-len", seq_len, "Sequence length S");
    o_vocab = app->add_option("--vocab", vocab, "Vocabulary size");
    o_classes = app->add_option("--classes", classes, "Output classes");
    o_kind = app->add_option("--kind", kind, "Attention kind");
    o_pooling = app->add_option("--pooling", pooling, "cls or mean");
    o_window = app->add_option("--window", window, "Sliding-window span");
    o_block = app->add_option("--block", block, "Block size for block kinds");
    o_stride = app->add_option("--stride", stride, "Stride for the strided kind");
    o_rank = app->add_option("--rank", rank, "Projection rank");
    o_features = app->add_option("--features", features, "Random-feature count");
    o_sinkhorn = app->add_option("--sinkhorn-iters", sinkhorn_iters, "Sinkhorn iterations");
    o_mixed = app->add_option("--mixed", mixed, "Comma-separated kinds for the mixture");
  }

  wadn::ModelConfig resolve(const json& base) const {
    wadn::ModelConfig c = wadn::model_config_from_json(base);
    if (o_layers->count()) c.ratio.layers = layers;
    if (o_heads->count()) c.ratio.heads = heads;
    if (o_embed->count()) c.embed_dim = embed;
    if (o_head_dim->count()) c.head_dim = head_dim;
    if (o_ffn->count()) c.ffn_dim = ffn;
    if (o_seq_len->count()) c.seq_len = seq_len;
    if (o_vocab->count()) c.vocab_size = vocab;
    if (o_classes->count()) c.num_classes = classes;
    if (o_kind->count()) c.attention.kind = wadn::kind_from_string(kind);
    if (o_window->count()) c.attention.window = window;
    if (o_block->count()) c.attention.block = block;
    if (o_stride->count()) c.attention.stride = stride;
    if (o_rank->count()) c.attention.rank = rank;
    if (o_features->count()) c.attention.features = features;
    if (o_sinkhorn->count()) c.attention.sinkhorn_iters = sinkhorn_iters;
    if (o_mixed->count()) {
      c.attention.kind = wadn::AttentionKind::Mixed;
      c.attention.mixed_kinds.clear();
      std::istringstream list(mixed);
      std::string item;
      while (std::getline(list, item, ','))
        if (!item.empty()) c.attention.mixed_kinds.push_back(wadn::kind_from_string(item));
    }
    // Re-derive the pooling default when flags changed the kind.
    if (o_pooling->count()) c.pooling = wadn::pooling_from_string(pooling);
    else if (!base.contains("pooling"))
      c.pooling = c.pools_by_mean() ? wadn::Pooling::Mean : wadn::Pooling::CLS;
    return c;
  }
};

wadn::TokenMode mode_from_string(const std::string& s) {
  if (s == "byte") return wadn::TokenMode::Byte;
  if (s == "word") return wadn::TokenMode::Word;
  throw wadn::ConfigError("unknown mode: " + s + " (expected byte or word)");
}

std::vector<std::string> dataset_lines(const wadn::Dataset& data) {
  std::vector<std::string> lines;
  lines.reserve(data.size());
  for (const wadn::Example& e : data) lines.push_back(e.text);
  return lines;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Wide-vs-deep transformer encoder workbench"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "Run configuration JSON")->configurable(false);
  CLI::Option* o_seed = app.add_option("--seed", seed, "Root seed; every component derives from it");

  // gen-listops ------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-listops", "Generate a Listops TSV dataset");
  std::size_t gen_count = 1000;
  std::string gen_out;
  wadn::ListopsSpec gen_spec;
  gen->add_option("--count", gen_count, "Examples to generate");
  gen->add_option("--out", gen_out, "Output TSV path")->required();
  gen->add_option("--max-depth", gen_spec.max_depth, "Maximum nesting depth");
  gen->add_option("--max-args", gen_spec.max_args, "Maximum operator arity");
  gen->add_option("--max-length", gen_spec.max_length, "Maximum expression characters");

  // train -------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train a model and keep the best checkpoint");
  ModelFlags train_model;
  train_model.add(train);
  std::string train_data_path, train_val_path, train_mode_flag;
  double train_val_fraction = -1.0;
  std::string metrics_path, checkpoint_path;
  double flag_lr = 0.0;
  std::size_t flag_warmup = 0, flag_steps = 0, flag_batch = 0, flag_eval_every = 0;
  CLI::Option* o_data = train->add_option("--data", train_data_path, "Training TSV");
  CLI::Option* o_val = train->add_option("--val", train_val_path, "Validation TSV");
  CLI::Option* o_mode_t = train->add_option("--mode", train_mode_flag, "byte or word");
  CLI::Option* o_vf = train->add_option("--val-fraction", train_val_fraction,
                                        "Held-out fraction when --val is absent");
  CLI::Option* o_metrics = train->add_option("--metrics", metrics_path, "Metrics CSV path");
  CLI::Option* o_ckpt = train->add_option("--checkpoint", checkpoint_path, "Best checkpoint path");
  CLI::Option* o_lr = train->add_option("--lr", flag_lr, "Base learning rate");
  CLI::Option* o_warmup = train->add_option("--warmup", flag_warmup, "Warmup steps");
  CLI::Option* o_steps = train->add_option("--steps", flag_steps, "Total optimizer steps");
  CLI::Option* o_batch = train->add_option("--batch", flag_batch, "Batch size");
  CLI::Option* o_eval_every = train->add_option("--eval-every", flag_eval_every,
                                                "Steps between validation passes");

  // eval ---------------------------------------------------------------------
  auto* eval = app.add_subcommand("eval", "Report accuracy of a checkpoint on a TSV dataset");
  std::string eval_ckpt, eval_data_path, eval_mode_flag = "byte";
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
  eval->add_option("--data", eval_data_path, "Evaluation TSV")->required();
  eval->add_option("--mode", eval_mode_flag, "byte or word");

  // bench ---------------------------------------------------------------------
  auto* bench = app.add_subcommand("bench", "Latency/size sweep across an aspect-ratio grid");
  ModelFlags bench_model;
  bench_model.add(bench);
  std::size_t bench_grid = 0, bench_repeats = 100;
  int bench_threads = 1;
  std::string bench_out, bench_kinds;
  CLI::Option* o_grid = bench->add_option("--grid", bench_grid, "Total heads for the grid");
  bench->add_option("--repeats", bench_repeats, "Timed forwards per row");
  bench->add_option("--threads", bench_threads, "Compute threads while timing");
  bench->add_option("--out", bench_out, "CSV output path (stdout when absent)");
  CLI::Option* o_kinds = bench->add_option("--kinds", bench_kinds,
                                           "Comma-separated kinds (default: config's kind)");

  // params ---------------------------------------------------------------------
  auto* params = app.add_subcommand("params", "Print the closed-form count plus a full breakdown");
  ModelFlags params_model;
  params_model.add(params);

  // attend ---------------------------------------------------------------------
  auto* attend = app.add_subcommand("attend", "Export attention weights for one input");
  ModelFlags attend_model;
  attend_model.add(attend);
  std::string attend_text, attend_ckpt, attend_out = "trace.json";
  std::string attend_mode_flag = "byte", attend_data_path;
  bool attend_dense = false, attend_full = false;
  attend->add_option("--text", attend_text, "Input text")->required();
  attend->add_option("--checkpoint", attend_ckpt, "Checkpoint (fresh seeded model when absent)");
  attend->add_option("--out", attend_out, "Trace JSON path");
  attend->add_option("--mode", attend_mode_flag, "byte or word");
  attend->add_option("--data", attend_data_path, "Corpus TSV for the word-mode vocab");
  attend->add_flag("--dense", attend_dense, "Reconstruct dense weights for kernelized kinds");
  attend->add_flag("--full-precision", attend_full, "Skip 6-significant-digit rounding");

  // --config/--seed live on the app; let them appear after the subcommand too.
  for (CLI::App* sub : {gen, train, eval, bench, params, attend}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\nuse --help for usage\n";
    return 2;
  }
  RunDoc doc = load_run_doc(config_path);

  if (*gen) {
    gen_spec.count = gen_count;
    wadn::Dataset ds = wadn::gen_listops(gen_spec, wadn::derive_seed(seed, "gen"));
    wadn::save_tsv(ds, gen_out);
    return 0;
  }

  if (*train) {
    wadn::ModelConfig mc = train_model.resolve(doc.model);
    wadn::TrainHyper th = wadn::train_hyper_from_json(doc.train);
    if (o_lr->count()) th.base_lr = flag_lr;
    if (o_warmup->count()) th.warmup_steps = flag_warmup;
    if (o_steps->count()) th.total_steps = flag_steps;
    if (o_batch->count()) th.batch_size = flag_batch;
    if (o_eval_every->count()) th.eval_every = flag_eval_every;
    if (o_seed->count() || !doc.train.contains("seed"))
      th.seed = wadn::derive_seed(seed, "train");

    std::string data_path = o_data->count()
                                ? train_data_path
                                : wadn::detail::get_string(doc.data, "train", "");
    if (data_path.empty()) throw wadn::ConfigError("train needs --data or data.train");
    std::string val_path =
        o_val->count() ? train_val_path : wadn::detail::get_string(doc.data, "val", "");
    std::string mode_name = o_mode_t->count()
                                ? train_mode_flag
                                : wadn::detail::get_string(doc.data, "mode", "byte");
    wadn::TokenMode mode = mode_from_string(mode_name);
    double vf = train_val_fraction;
    if (!o_vf->count()) {
      vf = 0.1;
      if (doc.data.contains("val_fraction")) vf = doc.data.at("val_fraction").get<double>();
    }

    wadn::Dataset train_set = wadn::load_tsv(data_path), val_set;
    if (!val_path.empty()) {
      val_set = wadn::load_tsv(val_path);
    } else {
      auto split = wadn::split_dataset(train_set, vf, wadn::derive_seed(seed, "split"));
      train_set = std::move(split.first);
      val_set = std::move(split.second);
    }

    wadn::Vocab vocab;
    const wadn::Vocab* vp = nullptr;
    if (mode == wadn::TokenMode::Word) {
      vocab = wadn::build_vocab(dataset_lines(train_set), mc.vocab_size);
      vp = &vocab;
    }

    std::string metrics = o_metrics->count()
                              ? metrics_path
                              : wadn::detail::get_string(doc.out, "metrics", "metrics.csv");
    std::string ckpt = o_ckpt->count()
                           ? checkpoint_path
                           : wadn::detail::get_string(doc.out, "checkpoint", "best.wadn");

    wadn::Model model = wadn::build_model(mc, wadn::derive_seed(seed, "model"));
    wadn::TrainReport report = wadn::train_loop(model, train_set, val_set, th, mode, vp, ckpt);
    wadn::write_metrics_csv(report, metrics);
    std::cout << "best_val_accuracy " << report.best_val_accuracy << " at step "
              << report.best_step << "\n";
    return 0;
  }

  if (*eval) {
    wadn::Model model = wadn::load_checkpoint(eval_ckpt);
    wadn::Dataset data = wadn::load_tsv(eval_data_path);
    wadn::TokenMode mode = mode_from_string(eval_mode_flag);
    wadn::Vocab vocab;
    const wadn::Vocab* vp = nullptr;
    if (mode == wadn::TokenMode::Word) {
      vocab = wadn::build_vocab(dataset_lines(data), model.config.vocab_size);
      vp = &vocab;
    }
    std::cout << wadn::evaluate(model, data, mode, vp).accuracy << "\n";
    return 0;
  }

  if (*bench) {
    wadn::ModelConfig mc = bench_model.resolve(doc.model);
    std::vector<wadn::AspectRatio> grid =
        o_grid->count() ? wadn::aspect_ratio_grid(bench_grid)
                        : std::vector<wadn::AspectRatio>{mc.ratio};
    std::vector<wadn::AttentionKind> kinds;
    if (o_kinds->count()) {
      std::istringstream list(bench_kinds);
      std::string item;
      while (std::getline(list, item, ','))
        if (!item.empty()) kinds.push_back(wadn::kind_from_string(item));
    } else {
      kinds.push_back(mc.attention.kind);
    }
    auto rows = wadn::sweep_report(mc, kinds, grid, bench_repeats,
                                   wadn::derive_seed(seed, "bench"), bench_threads);
    std::string csv = wadn::sweep_csv(rows);
    if (bench_out.empty()) {
      std::cout << csv;
    } else {
      std::ofstream out(bench_out, std::ios::trunc);
      if (!out) throw wadn::IoError("cannot open " + bench_out + " for writing");
      out << csv;
    }
    return 0;
  }

  if (*params) {
    wadn::ModelConfig mc = params_model.resolve(doc.model);
    wadn::Model model = wadn::build_model(mc, wadn::derive_seed(seed, "model"));
    wadn::ParamBreakdown b = wadn::total_param_count(model);
    std::cout << wadn::encoder_param_count(mc.ratio.layers, mc.embed_dim, mc.head_dim,
                                           mc.ratio.heads, mc.ffn_dim)
              << "\n";
    std::cout << "embedding " << b.embedding << "\n";
    std::cout << "positional " << b.positional << "\n";
    std::cout << "attention_core " << b.attention_core << "\n";
    std::cout << "attention_extra " << b.attention_extra << "\n";
    std::cout << "ffn " << b.ffn << "\n";
    std::cout << "norms " << b.norms << "\n";
    std::cout << "classifier " << b.classifier << "\n";
    std::cout << "total " << b.total() << "\n";
    std::cout << "mib " << wadn::model_size_mib(b.total()) << "\n";
    return 0;
  }

  if (*attend) {
    wadn::TokenMode mode = mode_from_string(attend_mode_flag);
    wadn::Model model = [&]() {
      if (!attend_ckpt.empty()) return wadn::load_checkpoint(attend_ckpt);
      wadn::ModelConfig mc = attend_model.resolve(doc.model);
      return wadn::build_model(mc, wadn::derive_seed(seed, "model"));
    }();
    wadn::Vocab vocab;
    const wadn::Vocab* vp = nullptr;
    if (mode == wadn::TokenMode::Word) {
      std::string corpus = !attend_data_path.empty()
                               ? attend_data_path
                               : wadn::detail::get_string(doc.data, "train", "");
      if (corpus.empty())
        throw wadn::ConfigError("word mode needs --data to build the vocab");
      vocab = wadn::build_vocab(dataset_lines(wadn::load_tsv(corpus)), model.config.vocab_size);
      vp = &vocab;
    }
    wadn::TraceDocument trace = wadn::export_trace(model, attend_text, mode, vp, attend_dense);
    std::ofstream out(attend_out, std::ios::trunc);
    if (!out) throw wadn::IoError("cannot open " + attend_out + " for writing");
    out << wadn::trace_to_json(trace, attend_full).dump(2) << "\n";
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
