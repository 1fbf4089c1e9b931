#include <gtest/gtest.h>

#include <sstream>
#include <string>
#include <vector>

#include "wadn/bench.hpp"

using namespace wadn;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.ratio = {1, 2};
  c.embed_dim = 16;
  c.head_dim = 4;
  c.ffn_dim = 32;
  c.seq_len = 16;
  c.vocab_size = 64;
  c.num_classes = 4;
  return c;
}

}  // namespace

TEST(Latency, SingleRepeatAndBounds) {
  ModelConfig c = tiny_config();
  Model m = build_model(c, 1);
  LatencyReport one = measure_latency(m, 1, 1, 0, 1);
  EXPECT_EQ(one.repeats, 1u);
  EXPECT_DOUBLE_EQ(one.mean_ms, one.min_ms);
  EXPECT_DOUBLE_EQ(one.mean_ms, one.max_ms);
  EXPECT_DOUBLE_EQ(one.std_ms, 0.0);
  EXPECT_EQ(one.threads, 1);
  EXPECT_EQ(one.config, "dot_product_L1H2");

  LatencyReport five = measure_latency(m, 5, 2, 0, 1);
  EXPECT_LE(five.min_ms, five.mean_ms);
  EXPECT_LE(five.mean_ms, five.max_ms);
  EXPECT_GT(five.min_ms, 0.0);

  EXPECT_THROW(measure_latency(m, 0), ConfigError);
}

TEST(Latency, InputIsSeededAndFullLength) {
  ModelConfig c = tiny_config();
  auto a = bench_input(c, 7);
  auto b = bench_input(c, 7);
  auto other = bench_input(c, 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, other);
  ASSERT_EQ(a.size(), c.seq_len);
  EXPECT_EQ(a[0], CLS_ID);
  for (std::size_t i = 1; i < a.size(); ++i) {
    EXPECT_GE(a[i], NUM_SPECIALS);
    EXPECT_LT(a[i], c.vocab_size);
  }
}

TEST(Size, HandSummedBytes) {
  ModelConfig c = tiny_config();
  Model m = build_model(c, 2);
  std::uint64_t hand = 0;
  visit_model_params(m, [&](const std::string&, Tensor& t, bool trainable) {
    if (trainable) hand += t.numel();
  });
  SizeReport r = size_report(m);
  EXPECT_EQ(r.params, hand);
  EXPECT_EQ(r.bytes, 4 * hand);
  EXPECT_DOUBLE_EQ(r.mib, static_cast<double>(r.bytes) / (1024.0 * 1024.0));
}

TEST(Size, GrowsWithDepth) {
  double prev = 0.0;
  for (std::size_t L : {1u, 2u, 3u}) {
    ModelConfig c = tiny_config();
    c.ratio.layers = L;
    Model m = build_model(c, 3);
    double mib = size_report(m).mib;
    EXPECT_GT(mib, prev);
    prev = mib;
  }
}

TEST(Size, WideDeepRatioAtReferenceDims) {
  // Byte-level reference dims; the wide single layer lands a bit under half
  // the deep stack's footprint.
  ModelConfig deep;
  deep.ratio = {6, 8};
  deep.embed_dim = 512;
  deep.head_dim = 64;
  deep.ffn_dim = 2048;
  deep.seq_len = 1024;
  deep.vocab_size = 259;
  deep.num_classes = 10;
  ModelConfig wide = deep;
  wide.ratio = {1, 48};

  Model md = build_model(deep, 4);
  Model mw = build_model(wide, 4);
  double ratio = size_report(mw).mib / size_report(md).mib;
  EXPECT_GE(ratio, 0.40);
  EXPECT_LE(ratio, 0.60);
}

TEST(Sweep, RowsColumnsAndInvariants) {
  ModelConfig base = tiny_config();
  std::vector<AttentionKind> kinds = {AttentionKind::DotProduct, AttentionKind::SinkhornBlock};
  base.attention.block = 4;
  auto grid = aspect_ratio_grid(16);
  auto rows = sweep_report(base, kinds, grid, 1, 9, 1);
  ASSERT_EQ(rows.size(), kinds.size() * grid.size());

  for (std::size_t k = 0; k < kinds.size(); ++k) {
    std::uint64_t attn = rows[k * grid.size()].attention_params;
    EXPECT_GT(attn, 0u);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const SweepRow& r = rows[k * grid.size() + g];
      EXPECT_EQ(r.attention_params, attn);
      EXPECT_EQ(r.layers, grid[g].layers);
      EXPECT_EQ(r.heads, grid[g].heads);
      EXPECT_GT(r.params, 0u);
      EXPECT_FALSE(r.has_accuracy);
    }
    // MiB strictly decreases as layers shrink along the sweep.
    for (std::size_t g = 1; g < grid.size(); ++g)
      EXPECT_LT(rows[k * grid.size() + g].mib, rows[k * grid.size() + g - 1].mib);
  }

  std::string csv = sweep_csv(rows);
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "kind,layers,heads,params,mib,lat_mean_ms,lat_std_ms,accuracy");
  std::size_t count = 0;
  std::string line;
  while (std::getline(lines, line)) {
    ++count;
    EXPECT_EQ(line.back(), ',');  // accuracy cell empty
  }
  EXPECT_EQ(count, rows.size());

  auto with_acc = sweep_report(base, {AttentionKind::DotProduct}, {{1, 2}}, 1, 9, 1,
                               [](Model&) { return 0.75; });
  ASSERT_EQ(with_acc.size(), 1u);
  EXPECT_TRUE(with_acc[0].has_accuracy);
  EXPECT_DOUBLE_EQ(with_acc[0].accuracy, 0.75);
  std::string acc_csv = sweep_csv(with_acc);
  EXPECT_NE(acc_csv.find("0.75\n"), std::string::npos);

  EXPECT_THROW(sweep_report(base, {}, grid, 1, 9), ConfigError);
}

TEST(Sweep, ParamColumnsReproducible) {
  ModelConfig base = tiny_config();
  auto grid = aspect_ratio_grid(4);
  auto a = sweep_report(base, {AttentionKind::DotProduct}, grid, 1, 5, 1);
  auto b = sweep_report(base, {AttentionKind::DotProduct}, grid, 1, 5, 1);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].params, b[i].params);
    EXPECT_EQ(a[i].mib, b[i].mib);
  }
}
