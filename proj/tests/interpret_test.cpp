#include <gtest/gtest.h>

#include <string>
#include <vector>

#include "wadn/interpret.hpp"

using namespace wadn;

namespace {

ModelConfig tiny_config(AttentionKind kind = AttentionKind::DotProduct) {
  ModelConfig c;
  c.ratio = {1, 4};
  c.embed_dim = 16;
  c.head_dim = 4;
  c.ffn_dim = 32;
  c.seq_len = 8;
  c.vocab_size = byte_vocab_size();
  c.num_classes = 5;
  c.attention.kind = kind;
  if (c.pools_by_mean()) c.pooling = Pooling::Mean;
  return c;
}

TraceDocument hand_trace() {
  TraceDocument doc;
  doc.side = 4;
  doc.tokens = {"[CLS]", "a", "b", "c"};
  doc.predicted_class = 1;
  doc.probs = {0.1, 0.7, 0.1, 0.05, 0.05};
  std::vector<double> head0 = {
      0.05, 0.9,  0.03, 0.02,
      0.25, 0.25, 0.25, 0.25,
      0.1,  0.2,  0.3,  0.4,
      0.4,  0.3,  0.2,  0.1,
  };
  std::vector<double> head1(16, 0.25);
  doc.layers.push_back({head0, head1});
  return doc;
}

}  // namespace

TEST(Trace, DocumentShapeAndContent) {
  ModelConfig c = tiny_config();
  Model m = build_model(c, 8);
  TraceDocument doc = export_trace(m, "abc", TokenMode::Byte);

  EXPECT_EQ(doc.tokens, (std::vector<std::string>{"[CLS]", "a", "b", "c"}));
  EXPECT_EQ(doc.side, 4u);
  ASSERT_EQ(doc.layers.size(), 1u);
  ASSERT_EQ(doc.layers[0].size(), c.ratio.heads);
  for (const auto& mat : doc.layers[0]) {
    ASSERT_EQ(mat.size(), doc.side * doc.side);
    for (std::size_t i = 0; i < doc.side; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < doc.side; ++j) sum += mat[i * doc.side + j];
      EXPECT_NEAR(sum, 1.0, 1e-5);
    }
  }

  double psum = 0.0;
  for (double p : doc.probs) psum += p;
  EXPECT_NEAR(psum, 1.0, 1e-6);
  EXPECT_EQ(doc.probs.size(), c.num_classes);
  EXPECT_EQ(doc.predicted_class,
            static_cast<std::size_t>(std::max_element(doc.probs.begin(), doc.probs.end()) -
                                     doc.probs.begin()));
}

TEST(Trace, MatrixCountIsLayersTimesHeads) {
  ModelConfig c = tiny_config();
  c.ratio = {2, 2};
  Model m = build_model(c, 9);
  TraceDocument doc = export_trace(m, "xy", TokenMode::Byte);
  ASSERT_EQ(doc.layers.size(), 2u);
  std::size_t matrices = 0;
  for (const auto& heads : doc.layers) matrices += heads.size();
  EXPECT_EQ(matrices, c.ratio.layers * c.ratio.heads);
}

TEST(Trace, SingleTokenMatrixIsOne) {
  ModelConfig c = tiny_config();
  c.seq_len = 1;
  Model m = build_model(c, 10);
  TraceDocument doc = export_trace(m, "", TokenMode::Byte);
  EXPECT_EQ(doc.tokens, (std::vector<std::string>{"[CLS]"}));
  ASSERT_EQ(doc.layers[0].size(), c.ratio.heads);
  for (const auto& mat : doc.layers[0]) {
    ASSERT_EQ(mat.size(), 1u);
    EXPECT_DOUBLE_EQ(mat[0], 1.0);
  }
}

TEST(Trace, CapabilityRules) {
  ModelConfig lk = tiny_config(AttentionKind::LinearKernel);
  Model mlk = build_model(lk, 11);
  EXPECT_THROW(export_trace(mlk, "ab", TokenMode::Byte), ContractError);
  TraceDocument dense = export_trace(mlk, "ab", TokenMode::Byte, nullptr, true);
  for (const auto& mat : dense.layers[0]) {
    for (std::size_t i = 0; i < dense.side; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < dense.side; ++j) sum += mat[i * dense.side + j];
      EXPECT_NEAR(sum, 1.0, 1e-5);
    }
  }

  ModelConfig lr = tiny_config(AttentionKind::LowRankProjection);
  lr.attention.rank = 4;
  Model mlr = build_model(lr, 12);
  EXPECT_THROW(export_trace(mlr, "ab", TokenMode::Byte), ContractError);
  EXPECT_THROW(export_trace(mlr, "ab", TokenMode::Byte, nullptr, true), ContractError);
}

TEST(Trace, PaddingCropFollowsKind) {
  ModelConfig dot = tiny_config();
  Model mdot = build_model(dot, 13);
  EXPECT_EQ(export_trace(mdot, "ab", TokenMode::Byte).side, 3u);

  ModelConfig sink = tiny_config(AttentionKind::SinkhornBlock);
  sink.attention.block = 4;
  Model msink = build_model(sink, 14);
  TraceDocument doc = export_trace(msink, "ab", TokenMode::Byte);
  EXPECT_EQ(doc.side, sink.seq_len);
  EXPECT_EQ(doc.tokens.size(), sink.seq_len);
  EXPECT_EQ(doc.tokens[4], "[PAD]");
}

TEST(Trace, JsonStructureAndRounding) {
  TraceDocument doc = hand_trace();
  doc.layers[0][0][1] = 0.123456789;
  json j = trace_to_json(doc);
  EXPECT_EQ(j["tokens"].size(), 4u);
  EXPECT_EQ(j["prediction"]["class"], 1);
  EXPECT_EQ(j["prediction"]["probs"].size(), 5u);
  EXPECT_DOUBLE_EQ(j["layers"][0]["heads"][0][0][1].get<double>(), 0.123457);

  json full = trace_to_json(doc, true);
  EXPECT_DOUBLE_EQ(full["layers"][0]["heads"][0][0][1].get<double>(), 0.123456789);

  ASSERT_EQ(j["layers"][0]["heads"].size(), 2u);
  ASSERT_EQ(j["layers"][0]["heads"][1].size(), 4u);
  ASSERT_EQ(j["layers"][0]["heads"][1][3].size(), 4u);
}

TEST(Saliency, RankingRules) {
  TraceDocument doc = hand_trace();
  auto ranked = head_saliency(doc);
  ASSERT_EQ(ranked.size(), 2u * 4u);
  EXPECT_EQ(ranked[0].head, 0u);
  EXPECT_EQ(ranked[0].token, 1u);
  EXPECT_DOUBLE_EQ(ranked[0].weight, 0.9);

  // Uniform head: ties stay in position order.
  std::vector<std::size_t> head1_order;
  for (const SaliencyEntry& e : ranked)
    if (e.head == 1) head1_order.push_back(e.token);
  EXPECT_EQ(head1_order, (std::vector<std::size_t>{0, 1, 2, 3}));

  // Top entry per head matches a plain argmax of that head's row.
  for (std::size_t h = 0; h < 2; ++h) {
    const auto& mat = doc.layers[0][h];
    std::size_t best = 0;
    for (std::size_t t = 1; t < 4; ++t)
      if (mat[t] > mat[best]) best = t;
    for (const SaliencyEntry& e : ranked)
      if (e.head == h) {
        EXPECT_EQ(e.token, best);
        break;
      }
  }

  auto row2 = head_saliency(doc, 0, 2);
  EXPECT_EQ(row2[0].head, 0u);
  EXPECT_EQ(row2[0].token, 3u);

  EXPECT_THROW(head_saliency(doc, 1, 0), IndexError);
  EXPECT_THROW(head_saliency(doc, 0, 9), IndexError);
}
