// Prints the size/latency sweep for dot-product attention across every
// aspect ratio with 16 total heads.

#include <cstdio>

#include "wadn/bench.hpp"
#include "wadn/model.hpp"

int main() {
  wadn::ModelConfig base;
  base.embed_dim = 64;
  base.head_dim = 16;
  base.ffn_dim = 256;
  base.seq_len = 128;

  auto rows = wadn::sweep_report(base, {wadn::AttentionKind::DotProduct},
                                 wadn::aspect_ratio_grid(16), 20, 3);
  std::printf("%s", wadn::sweep_csv(rows).c_str());
  return 0;
}
