#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "wadn/grad_check.hpp"
#include "wadn/ops.hpp"
#include "wadn/tensor.hpp"

using namespace wadn;

namespace {

Tensor randn(Shape shape, uint64_t seed, bool requires_grad = false) {
  Rng rng(seed);
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = rng.normal();
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST(TensorBasics, ConstructionAndAccess) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_DOUBLE_EQ(t.at({1, 2}), 6.0);
  EXPECT_THROW(Tensor({2, 3}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3, 4}).item(), ContractError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(7.5).item(), 7.5);
  EXPECT_DOUBLE_EQ(Tensor::ones({4}).data()[3], 1.0);
}

TEST(TensorBasics, RngDeterminism) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng(42).next_u64(), c.next_u64());
  EXPECT_NE(derive_seed(1, "embedding"), derive_seed(1, "positional"));
  EXPECT_EQ(derive_seed(9, "x"), derive_seed(9, "x"));

  Rng r(7);
  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LE(std::abs(r.truncated_normal(0.02)), 0.04 + 1e-12);
  }

  std::vector<int> v1{1, 2, 3, 4, 5, 6, 7, 8}, v2 = v1;
  Rng s1(5), s2(5);
  shuffle(v1, s1);
  shuffle(v2, s2);
  EXPECT_EQ(v1, v2);
}

TEST(Elementwise, BroadcastAddMul) {
  Tensor a = randn({2, 3, 4}, 1);
  Tensor b = randn({3, 4}, 2);
  Tensor c = add(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 4}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k)
        EXPECT_DOUBLE_EQ(c.at({i, j, k}), a.at({i, j, k}) + b.at({j, k}));

  Tensor col = randn({2, 3, 1}, 3);
  Tensor d = mul(a, col);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k)
        EXPECT_DOUBLE_EQ(d.at({i, j, k}), a.at({i, j, k}) * col.at({i, j, 0}));

  EXPECT_THROW(add(randn({2, 3}, 4), randn({2, 4}, 5)), ShapeError);
}

TEST(Elementwise, BroadcastGradReducesOverExpandedDims) {
  Tensor a = randn({2, 3}, 10, true);
  Tensor b = randn({3}, 11, true);
  Tensor loss = sum_all(mul(add(a, b), add(a, b)));
  loss.backward();
  // d/db sum (a+b)^2 = sum over rows of 2(a+b)
  for (std::size_t j = 0; j < 3; ++j) {
    double expect = 0.0;
    for (std::size_t i = 0; i < 2; ++i) expect += 2.0 * (a.at({i, j}) + b.at({j}));
    EXPECT_NEAR(b.grad().at({j}), expect, 1e-12);
  }
}

TEST(Elementwise, UnaryValuesAndGuards) {
  Tensor x({5}, {-2.0, -0.5, 0.0, 0.5, 2.0});
  Tensor r = relu(x);
  EXPECT_DOUBLE_EQ(r.data()[0], 0.0);
  EXPECT_DOUBLE_EQ(r.data()[4], 2.0);

  Tensor g = gelu(x);
  for (std::size_t i = 0; i < 5; ++i) {
    double v = x.data()[i];
    EXPECT_NEAR(g.data()[i], 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))), 1e-15);
  }

  Tensor e = wadn::exp(x);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(e.data()[i], std::exp(x.data()[i]));
  EXPECT_THROW(wadn::exp(Tensor::scalar(1e4)), ContractError);

  Tensor rec = reciprocal(Tensor({2}, {4.0, -0.5}));
  EXPECT_DOUBLE_EQ(rec.data()[0], 0.25);
  EXPECT_DOUBLE_EQ(rec.data()[1], -2.0);
  EXPECT_THROW(reciprocal(Tensor::scalar(0.0)), ContractError);

  Tensor ep = elu_plus_one(x);
  EXPECT_DOUBLE_EQ(ep.data()[0], std::exp(-2.0));
  EXPECT_DOUBLE_EQ(ep.data()[4], 3.0);
  for (double v : ep.data()) EXPECT_GT(v, 0.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Tensor a = randn({5, 7}, 20);
  Tensor b = randn({7, 3}, 21);
  Tensor c = matmul(a, b);
  auto ref = oracle::matmul_ref(a.data(), b.data(), 5, 7, 3);
  ASSERT_EQ(c.shape(), (Shape{5, 3}));
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c.data()[i], ref[i], 1e-12);

  // Batched with broadcast: [H,M,K] x [B,H,K,N].
  Tensor ab = randn({3, 2, 4}, 22);
  Tensor bb = randn({2, 3, 4, 5}, 23);
  Tensor cb = matmul(ab, bb);
  ASSERT_EQ(cb.shape(), (Shape{2, 3, 2, 5}));
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t h = 0; h < 3; ++h) {
      std::vector<double> as(ab.data().begin() + h * 8, ab.data().begin() + (h + 1) * 8);
      std::vector<double> bs(bb.data().begin() + (bi * 3 + h) * 20,
                             bb.data().begin() + (bi * 3 + h + 1) * 20);
      auto slice = oracle::matmul_ref(as, bs, 2, 4, 5);
      for (std::size_t i = 0; i < slice.size(); ++i)
        EXPECT_NEAR(cb.data()[(bi * 3 + h) * 10 + i], slice[i], 1e-12);
    }

  EXPECT_THROW(matmul(randn({2, 3}, 1), randn({4, 2}, 2)), ShapeError);
}

TEST(Matmul, TransposedVariantAgrees) {
  Tensor a = randn({2, 4, 6}, 30);
  Tensor b = randn({2, 5, 6}, 31);
  Tensor c1 = matmul_nt(a, b);
  Tensor c2 = matmul(a, transpose_last2(b));
  ASSERT_EQ(c1.shape(), (Shape{2, 4, 5}));
  for (std::size_t i = 0; i < c1.numel(); ++i) EXPECT_NEAR(c1.data()[i], c2.data()[i], 1e-12);
}

TEST(Matmul, GradientsMatchCentralDifferences) {
  Tensor a = randn({3, 4}, 40, true);
  Tensor b = randn({4, 2}, 41, true);
  auto rep = grad_check([&] { return sum_all(mul(matmul(a, b), matmul(a, b))); }, {a, b});
  EXPECT_LT(rep.max_rel, 1e-6);

  Tensor q = randn({2, 2, 3, 4}, 42, true);
  Tensor k = randn({2, 2, 5, 4}, 43, true);
  auto rep2 = grad_check([&] { return sum_all(relu(matmul_nt(q, k))); }, {q, k});
  EXPECT_LT(rep2.max_rel, 1e-6);

  // Broadcast batch dims must reduce correctly.
  Tensor w = randn({3, 4, 2}, 44, true);
  Tensor x = randn({2, 3, 5, 4}, 45, true);
  auto rep3 = grad_check([&] { return sum_all(matmul(x, w)); }, {w, x});
  EXPECT_LT(rep3.max_rel, 1e-6);
}

TEST(ShapeOps, PermuteReshapeConcat) {
  Tensor a = randn({2, 3, 4, 5}, 50);
  Tensor p = permute(a, {0, 2, 1, 3});
  ASSERT_EQ(p.shape(), (Shape{2, 4, 3, 5}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 5; ++k)
          EXPECT_DOUBLE_EQ(p.at({b, j, i, k}), a.at({b, i, j, k}));

  Tensor back = permute(p, {0, 2, 1, 3});
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_DOUBLE_EQ(back.data()[i], a.data()[i]);
  EXPECT_THROW(permute(a, {0, 1, 2}), ShapeError);
  EXPECT_THROW(permute(a, {0, 1, 2, 2}), ShapeError);

  Tensor r = reshape(a, {6, 20});
  EXPECT_EQ(r.shape(), (Shape{6, 20}));
  EXPECT_DOUBLE_EQ(r.data()[0], a.data()[0]);
  EXPECT_THROW(reshape(a, {7, 20}), ShapeError);

  Tensor t2 = transpose_last2(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  EXPECT_EQ(t2.shape(), (Shape{3, 2}));
  EXPECT_DOUBLE_EQ(t2.at({2, 0}), 3.0);
  EXPECT_DOUBLE_EQ(t2.at({0, 1}), 4.0);

  Tensor c1 = randn({2, 1, 3}, 51), c2 = randn({2, 2, 3}, 52);
  Tensor cat = concat({c1, c2}, 1);
  ASSERT_EQ(cat.shape(), (Shape{2, 3, 3}));
  EXPECT_DOUBLE_EQ(cat.at({1, 0, 2}), c1.at({1, 0, 2}));
  EXPECT_DOUBLE_EQ(cat.at({1, 2, 0}), c2.at({1, 1, 0}));
  EXPECT_THROW(concat({c1, randn({2, 2, 4}, 53)}, 1), ShapeError);
}

TEST(ShapeOps, GradFlowsThroughRearrangement) {
  Tensor a = randn({2, 3, 4}, 60, true);
  Tensor b = randn({2, 3, 4}, 61, true);
  auto rep = grad_check(
      [&] {
        Tensor cat = concat({a, b}, 2);
        Tensor p = permute(cat, {1, 0, 2});
        return sum_all(mul(reshape(p, {6, 8}), reshape(p, {6, 8})));
      },
      {a, b});
  EXPECT_LT(rep.max_rel, 1e-6);
}

TEST(Reductions, SumMeanAxis) {
  Tensor a = randn({2, 3, 4}, 70);
  Tensor s1 = sum_axis(a, 1);
  ASSERT_EQ(s1.shape(), (Shape{2, 4}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double expect = 0.0;
      for (std::size_t j = 0; j < 3; ++j) expect += a.at({i, j, k});
      EXPECT_NEAR(s1.at({i, k}), expect, 1e-12);
    }

  Tensor m2 = mean_axis(a, 2, true);
  ASSERT_EQ(m2.shape(), (Shape{2, 3, 1}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double expect = 0.0;
      for (std::size_t k = 0; k < 4; ++k) expect += a.at({i, j, k});
      EXPECT_NEAR(m2.at({i, j, 0}), expect / 4.0, 1e-12);
    }

  EXPECT_NEAR(mean_all(a).item(),
              std::accumulate(a.data().begin(), a.data().end(), 0.0) / a.numel(), 1e-12);

  Tensor g = randn({2, 3}, 71, true);
  auto rep = grad_check([&] { return sum_all(mul(mean_axis(g, 0), mean_axis(g, 0))); }, {g});
  EXPECT_LT(rep.max_rel, 1e-6);
}

TEST(Softmax, MatchesHighPrecisionOracle) {
  Tensor a = randn({4, 9}, 80);
  Tensor s = softmax_lastdim(a);
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> row(a.data().begin() + r * 9, a.data().begin() + (r + 1) * 9);
    auto ref = oracle::softmax_ref(row);
    double sum = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      EXPECT_NEAR(s.at({r, j}), ref[j], 1e-14);
      sum += s.at({r, j});
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }

  // Shift invariance.
  Tensor shifted = softmax_lastdim(add_scalar(a, 123.0));
  for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(shifted.data()[i], s.data()[i], 1e-12);

  Tensor x = randn({3, 5}, 81, true);
  auto rep = grad_check([&] { return sum_all(mul(softmax_lastdim(x), randn({3, 5}, 82))); }, {x});
  EXPECT_LT(rep.max_rel, 1e-6);
}

TEST(MaskedSoftmax, ExactZerosAndRowSums) {
  std::size_t B = 2, H = 2, S = 6;
  Tensor scores = randn({B, H, S, S}, 90);
  std::vector<double> m(S * S, 0.0);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j)
      if (i / 2 == j / 2) m[i * S + j] = 1.0;
  Tensor mask2d({S, S}, m);

  std::vector<double> kvd(B * S, 1.0), qvd(B * S, 1.0);
  kvd[1 * S + 5] = 0.0;  // batch 1: last key padded
  qvd[1 * S + 5] = 0.0;
  Tensor kv({B, S}, kvd), qv({B, S}, qvd);

  Tensor w = masked_softmax(scores, mask2d, kv, qv);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < S; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < S; ++j) {
          double v = w.at({b, h, i, j});
          bool permitted = m[i * S + j] > 0.5 && kvd[b * S + j] > 0.5;
          if (!permitted) EXPECT_EQ(v, 0.0);
          sum += v;
        }
        if (qvd[b * S + i] > 0.5)
          EXPECT_NEAR(sum, 1.0, 1e-12);
        else
          EXPECT_EQ(sum, 0.0);
      }
}

TEST(MaskedSoftmax, FullyMaskedRealRowThrows) {
  std::size_t S = 4;
  Tensor scores = randn({1, 1, S, S}, 91);
  Tensor mask2d = Tensor::zeros({S, S});
  EXPECT_THROW(masked_softmax(scores, mask2d), ContractError);

  // A padded query with zero permitted keys is fine: zero row, no throw.
  std::vector<double> qvd(S, 1.0);
  qvd[2] = 0.0;
  std::vector<double> m(S * S, 1.0);
  for (std::size_t j = 0; j < S; ++j) m[2 * S + j] = 0.0;
  Tensor w = masked_softmax(scores, Tensor({S, S}, m), {}, Tensor({1, S}, qvd));
  for (std::size_t j = 0; j < S; ++j) EXPECT_EQ(w.at({0, 0, 2, j}), 0.0);
}

TEST(MaskedSoftmax, GradMatchesCentralDifferences) {
  std::size_t S = 5;
  Tensor scores = randn({1, 2, S, S}, 92, true);
  std::vector<double> m(S * S, 0.0);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j)
      if (j <= i) m[i * S + j] = 1.0;
  Tensor mask2d({S, S}, m);
  Tensor target = randn({1, 2, S, S}, 93);
  auto rep = grad_check([&] { return sum_all(mul(masked_softmax(scores, mask2d), target)); },
                        {scores});
  EXPECT_LT(rep.max_rel, 1e-6);
}

TEST(LayerNorm, MatchesOracleAndNormalizes) {
  std::size_t E = 8;
  Tensor x = randn({3, E}, 100);
  Tensor gamma = randn({E}, 101);
  Tensor beta = randn({E}, 102);
  Tensor y = layer_norm(x, gamma, beta);
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> row(x.data().begin() + r * E, x.data().begin() + (r + 1) * E);
    auto ref = oracle::layer_norm_ref(row, gamma.data(), beta.data(), 1e-5);
    for (std::size_t i = 0; i < E; ++i) EXPECT_NEAR(y.at({r, i}), ref[i], 1e-12);
  }

  Tensor plain = layer_norm(x, Tensor::ones({E}), Tensor::zeros({E}));
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t i = 0; i < E; ++i) mu += plain.at({r, i});
    mu /= E;
    for (std::size_t i = 0; i < E; ++i) var += (plain.at({r, i}) - mu) * (plain.at({r, i}) - mu);
    var /= E;
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }

  Tensor xg = randn({2, 3, E}, 103, true);
  Tensor gg = randn({E}, 104, true);
  Tensor bg = randn({E}, 105, true);
  auto rep = grad_check(
      [&] { return sum_all(mul(layer_norm(xg, gg, bg), randn({2, 3, E}, 106))); }, {xg, gg, bg});
  EXPECT_LT(rep.max_rel, 1e-5);
}

TEST(Embedding, GatherScatterAndBounds) {
  Tensor table = randn({6, 3}, 110, true);
  std::vector<std::size_t> ids{0, 5, 2, 5};
  Tensor e = embedding_lookup(table, ids, {2, 2});
  ASSERT_EQ(e.shape(), (Shape{2, 2, 3}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      EXPECT_DOUBLE_EQ(e.data()[i * 3 + c], table.at({ids[i], c}));

  Tensor loss = sum_all(e);
  loss.backward();
  // Row 5 appears twice, so its gradient rows accumulate.
  EXPECT_DOUBLE_EQ(table.grad().at({5, 0}), 2.0);
  EXPECT_DOUBLE_EQ(table.grad().at({0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(table.grad().at({1, 0}), 0.0);

  EXPECT_THROW(embedding_lookup(table, {0, 6}, {2}), IndexError);
}

TEST(Pooling, TakePositionAndMaskedMean) {
  Tensor x = randn({2, 4, 3}, 120, true);
  Tensor cls = take_position(x, 0);
  ASSERT_EQ(cls.shape(), (Shape{2, 3}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t e = 0; e < 3; ++e) EXPECT_DOUBLE_EQ(cls.at({b, e}), x.at({b, 0, e}));
  EXPECT_THROW(take_position(x, 4), IndexError);

  Tensor valid({2, 4}, {1, 1, 0, 0, 1, 1, 1, 1});
  Tensor pooled = masked_mean_pool(x, valid);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_NEAR(pooled.at({0, e}), (x.at({0, 0, e}) + x.at({0, 1, e})) / 2.0, 1e-12);
    EXPECT_NEAR(pooled.at({1, e}),
                (x.at({1, 0, e}) + x.at({1, 1, e}) + x.at({1, 2, e}) + x.at({1, 3, e})) / 4.0,
                1e-12);
  }
  EXPECT_THROW(masked_mean_pool(x, Tensor::zeros({2, 4})), ContractError);

  auto rep = grad_check(
      [&] { return sum_all(mul(masked_mean_pool(x, valid), masked_mean_pool(x, valid))); }, {x});
  EXPECT_LT(rep.max_rel, 1e-6);
}

TEST(Autodiff, BackwardContractAndAccumulation) {
  Tensor a = randn({2, 2}, 130, true);
  EXPECT_THROW(mul(a, a).backward(), ContractError);

  Tensor loss1 = sum_all(mul(a, a));
  loss1.backward();
  Tensor g1 = a.grad();
  Tensor loss2 = sum_all(mul(a, a));
  loss2.backward();
  for (std::size_t i = 0; i < a.numel(); ++i)
    EXPECT_NEAR(a.grad().data()[i], 2.0 * g1.data()[i], 1e-12);

  a.zero_grad();
  EXPECT_DOUBLE_EQ(a.grad().data()[0], 0.0);
}

TEST(Autodiff, DiamondGraphAccumulatesOnce) {
  // y = x used twice: d/dx (x*x + x*x) = 4x.
  Tensor x = randn({3}, 131, true);
  Tensor p = mul(x, x);
  Tensor loss = sum_all(add(p, p));
  loss.backward();
  for (std::size_t i = 0; i < 3; ++i)
    EXPECT_NEAR(x.grad().data()[i], 4.0 * x.data()[i], 1e-12);
}

TEST(Autodiff, NoGradGuardDisablesRecording) {
  Tensor a = randn({2, 2}, 132, true);
  {
    NoGradGuard ng;
    Tensor y = mul(a, a);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.node()->parents.empty());
  }
  Tensor y = mul(a, a);
  EXPECT_TRUE(y.requires_grad());
}

TEST(Autodiff, CompositeChainGradCheck) {
  Tensor x = randn({2, 6}, 140, true);
  Tensor w = randn({6, 4}, 141, true);
  Tensor gamma = Tensor::ones({4}, true);
  Tensor beta = Tensor::zeros({4}, true);
  auto rep = grad_check(
      [&] {
        Tensor h = gelu(matmul(x, w));
        Tensor n = layer_norm(h, gamma, beta);
        return mean_all(mul(softmax_lastdim(n), n));
      },
      {x, w, gamma, beta});
  EXPECT_LT(rep.max_rel, 1e-5);
}
