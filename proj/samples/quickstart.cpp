// Generates a small Listops set, trains a one-layer model on it, and prints
// where the attention of the best head lands for one expression.

#include <cstdio>
#include <string>

#include "wadn/data.hpp"
#include "wadn/interpret.hpp"
#include "wadn/model.hpp"
#include "wadn/train.hpp"

int main() {
  wadn::ListopsSpec spec;
  spec.count = 2000;
  spec.max_depth = 2;
  wadn::Dataset data = wadn::gen_listops(spec, 7);
  auto [train_set, val_set] = wadn::split_dataset(data, 0.1, 8);

  wadn::ModelConfig cfg;
  cfg.ratio = {1, 4};
  cfg.embed_dim = 32;
  cfg.head_dim = 8;
  cfg.ffn_dim = 64;
  cfg.seq_len = 64;
  cfg.num_classes = 10;

  wadn::TrainHyper hyper;
  hyper.base_lr = 0.05;
  hyper.warmup_steps = 30;
  hyper.total_steps = 300;
  hyper.batch_size = 32;
  hyper.eval_every = 100;
  hyper.seed = 9;

  wadn::Model model = wadn::build_model(cfg, 10);
  wadn::TrainReport report = wadn::train_loop(model, train_set, val_set, hyper);
  std::printf("best validation accuracy %.3f at step %zu\n", report.best_val_accuracy,
              report.best_step);

  std::string text = "[MAX 2 9 [MIN 4 7 ] 0 ]";
  wadn::TraceDocument trace = wadn::export_trace(model, text, wadn::TokenMode::Byte);
  std::printf("input %s -> class %zu\n", text.c_str(), trace.predicted_class);
  auto ranked = wadn::head_saliency(trace, 0, 0);
  std::printf("the CLS row attends hardest to:");
  for (std::size_t i = 0; i < 3 && i < ranked.size(); ++i)
    std::printf("  %s (head %zu, %.2f)", trace.tokens[ranked[i].token].c_str(), ranked[i].head,
                ranked[i].weight);
  std::printf("\n");
  return 0;
}
