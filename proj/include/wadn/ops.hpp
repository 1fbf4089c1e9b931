#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "wadn/tensor.hpp"

#if defined(WADN_USE_CBLAS)
#include <cblas.h>
#endif

namespace wadn {

/// Caps the threads used by the matmul backend. No-op for the plain-loop path.
inline void set_compute_threads(int n) {
#if defined(WADN_USE_CBLAS)
  openblas_set_num_threads(n);
#else
  (void)n;
#endif
}

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    std::size_t ad = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    std::size_t bd = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ad != bd && ad != 1 && bd != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(ad, bd);
  }
  return out;
}

/// Row-major strides of `shape` aligned to a broadcast result of rank
/// `rank`; broadcast dimensions get stride zero.
inline std::vector<std::size_t> aligned_strides(const Shape& shape, const Shape& result) {
  std::size_t rank = result.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    std::size_t ri = i + (rank - shape.size());
    strides[ri] = shape[i] == 1 ? 0 : acc;
    acc *= shape[i];
  }
  for (std::size_t i = 0; i < rank; ++i)
    if (strides[i] != 0 && shape[i + shape.size() - rank] != result[i]) strides[i] = 0;
  return strides;
}

/// Odometer walk over `result`, handing the callback flat offsets into the
/// result and both broadcast operands.
template <typename Fn>
void broadcast_walk(const Shape& result, const std::vector<std::size_t>& astr,
                    const std::vector<std::size_t>& bstr, Fn&& fn) {
  std::size_t n = shape_numel(result);
  std::size_t rank = result.size();
  std::vector<std::size_t> coords(rank, 0);
  std::size_t ai = 0, bi = 0;
  for (std::size_t ri = 0; ri < n; ++ri) {
    fn(ri, ai, bi);
    for (std::size_t d = rank; d-- > 0;) {
      if (++coords[d] < result[d]) {
        ai += astr[d];
        bi += bstr[d];
        break;
      }
      coords[d] = 0;
      ai -= astr[d] * (result[d] - 1);
      bi -= bstr[d] * (result[d] - 1);
    }
  }
}

enum class BinaryKind { Add, Sub, Mul };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  Shape rs = broadcast_shapes(as, bs);
  std::size_t n = shape_numel(rs);
  std::vector<double> out(n);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  if (as == bs) {
    switch (kind) {
      case BinaryKind::Add:
        for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i];
        break;
      case BinaryKind::Sub:
        for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i];
        break;
      case BinaryKind::Mul:
        for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i];
        break;
    }
  } else {
    auto astr = aligned_strides(as, rs);
    auto bstr = aligned_strides(bs, rs);
    switch (kind) {
      case BinaryKind::Add:
        broadcast_walk(rs, astr, bstr,
                       [&](std::size_t ri, std::size_t ai, std::size_t bi) { out[ri] = ad[ai] + bd[bi]; });
        break;
      case BinaryKind::Sub:
        broadcast_walk(rs, astr, bstr,
                       [&](std::size_t ri, std::size_t ai, std::size_t bi) { out[ri] = ad[ai] - bd[bi]; });
        break;
      case BinaryKind::Mul:
        broadcast_walk(rs, astr, bstr,
                       [&](std::size_t ri, std::size_t ai, std::size_t bi) { out[ri] = ad[ai] * bd[bi]; });
        break;
    }
  }
  Tensor ta = a, tb = b;
  return make_result(rs, std::move(out), {a, b}, [ta, tb, kind, rs](TensorNode& node) {
    auto astr = aligned_strides(ta.shape(), rs);
    auto bstr = aligned_strides(tb.shape(), rs);
    const double* g = node.grad.data();
    double* ga = ta.requires_grad() ? ta.node()->grad_buffer() : nullptr;
    double* gb = tb.requires_grad() ? tb.node()->grad_buffer() : nullptr;
    const double* ad = ta.data().data();
    const double* bd = tb.data().data();
    broadcast_walk(rs, astr, bstr, [&](std::size_t ri, std::size_t ai, std::size_t bi) {
      switch (kind) {
        case BinaryKind::Add:
          if (ga) ga[ai] += g[ri];
          if (gb) gb[bi] += g[ri];
          break;
        case BinaryKind::Sub:
          if (ga) ga[ai] += g[ri];
          if (gb) gb[bi] -= g[ri];
          break;
        case BinaryKind::Mul:
          if (ga) ga[ai] += g[ri] * bd[bi];
          if (gb) gb[bi] += g[ri] * ad[ai];
          break;
      }
    });
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinaryKind::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinaryKind::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinaryKind::Mul); }

inline Tensor scale(const Tensor& a, double c) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* ad = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * c;
  Tensor ta = a;
  return detail::make_result(a.shape(), std::move(out), {a}, [ta, c](TensorNode& node) {
    if (!ta.requires_grad()) return;
    double* ga = ta.node()->grad_buffer();
    const double* g = node.grad.data();
    for (std::size_t i = 0; i < node.grad.size(); ++i) ga[i] += g[i] * c;
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* ad = a.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + c;
  Tensor ta = a;
  return detail::make_result(a.shape(), std::move(out), {a}, [ta](TensorNode& node) {
    if (!ta.requires_grad()) return;
    double* ga = ta.node()->grad_buffer();
    const double* g = node.grad.data();
    for (std::size_t i = 0; i < node.grad.size(); ++i) ga[i] += g[i];
  });
}

namespace detail {

template <typename F, typename DF>
Tensor unary_op(const Tensor& a, F&& f, DF&& df, const char* name, bool check_finite) {
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* ad = a.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(ad[i]);
    if (check_finite && !std::isfinite(out[i]))
      throw ContractError(std::string(name) + " produced a non-finite value from input " +
                          std::to_string(ad[i]));
  }
  Tensor ta = a;
  std::vector<double> saved = out;
  return make_result(a.shape(), std::move(out), {a},
                     [ta, df, saved = std::move(saved)](TensorNode& node) {
                       if (!ta.requires_grad()) return;
                       double* ga = ta.node()->grad_buffer();
                       const double* g = node.grad.data();
                       const double* xd = ta.data().data();
                       for (std::size_t i = 0; i < node.grad.size(); ++i)
                         ga[i] += g[i] * df(xd[i], saved[i]);
                     });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu", false);
}

/// Exact gelu, 0.5 x (1 + erf(x / sqrt(2))).
inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary_op(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      },
      "gelu", false);
}

/// Elementwise exponential. Throws ContractError on overflow rather than
/// letting infinities propagate into attention weights.
inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp", true);
}

/// Elementwise 1/x with the same non-finite guard as exp.
inline Tensor reciprocal(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; }, "reciprocal",
      true);
}

/// elu(x) + 1: positive feature map for kernelized attention.
inline Tensor elu_plus_one(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x + 1.0 : std::exp(x); },
      [](double x, double y) { return x > 0.0 ? 1.0 : y; }, "elu_plus_one", false);
}

namespace detail {

/// C = alpha op(A) op(B) + beta C with row-major storage. op(A) is MxK,
/// op(B) is KxN. Backed by BLAS when available.
inline void gemm(bool ta, bool tb, std::size_t M, std::size_t N, std::size_t K, double alpha,
                 const double* A, const double* B, double beta, double* C) {
#if defined(WADN_USE_CBLAS)
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<blasint>(M), static_cast<blasint>(N), static_cast<blasint>(K), alpha, A,
              static_cast<blasint>(ta ? M : K), B, static_cast<blasint>(tb ? K : N), beta, C,
              static_cast<blasint>(N));
#else
  if (beta == 0.0) {
    std::fill(C, C + M * N, 0.0);
  } else if (beta != 1.0) {
    for (std::size_t i = 0; i < M * N; ++i) C[i] *= beta;
  }
  if (!ta && !tb) {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        double av = alpha * A[i * K + k];
        const double* brow = B + k * N;
        double* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const double* arow = A + i * K;
        const double* brow = B + j * K;
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += arow[k] * brow[k];
        C[i * N + j] += alpha * s;
      }
  } else if (ta && !tb) {
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t i = 0; i < M; ++i) {
        double av = alpha * A[k * M + i];
        const double* brow = B + k * N;
        double* crow = C + i * N;
        for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
      }
  } else {
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += A[k * M + i] * B[j * K + k];
        C[i * N + j] += alpha * s;
      }
  }
#endif
}

/// Batched matmul over broadcast leading dims. `trans_b` selects A B^T, in
/// which case b is [..., N, K] instead of [..., K, N].
inline Tensor matmul_impl(const Tensor& a, const Tensor& b, bool trans_b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2)
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(as) + " and " +
                     shape_str(bs));
  std::size_t M = as[as.size() - 2];
  std::size_t K = as[as.size() - 1];
  std::size_t N = trans_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
  std::size_t Kb = trans_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
  if (K != Kb)
    throw ShapeError(std::string("matmul inner dimensions disagree: ") + shape_str(as) +
                     (trans_b ? " x transposed " : " x ") + shape_str(bs));

  Shape abatch(as.begin(), as.end() - 2);
  Shape bbatch(bs.begin(), bs.end() - 2);
  Shape batch = broadcast_shapes(abatch, bbatch);
  Shape rs = batch;
  rs.push_back(M);
  rs.push_back(N);

  auto astr = aligned_strides(abatch, batch);
  auto bstr = aligned_strides(bbatch, batch);
  std::size_t amat = M * K;
  std::size_t bmat = bs[bs.size() - 2] * bs[bs.size() - 1];
  std::size_t cmat = M * N;
  for (auto& s : astr) s *= amat;
  for (auto& s : bstr) s *= bmat;

  std::size_t nbatch = shape_numel(batch);
  std::vector<double> out(nbatch * cmat);
  const double* ad = a.data().data();
  const double* bd = b.data().data();
  {
    std::vector<std::size_t> coords(batch.size(), 0);
    std::size_t ai = 0, bi = 0;
    for (std::size_t r = 0; r < nbatch; ++r) {
      gemm(false, trans_b, M, N, K, 1.0, ad + ai, bd + bi, 0.0, out.data() + r * cmat);
      for (std::size_t d = batch.size(); d-- > 0;) {
        if (++coords[d] < batch[d]) {
          ai += astr[d];
          bi += bstr[d];
          break;
        }
        coords[d] = 0;
        ai -= astr[d] * (batch[d] - 1);
        bi -= bstr[d] * (batch[d] - 1);
      }
    }
  }

  Tensor ta = a, tb = b;
  return make_result(
      rs, std::move(out), {a, b},
      [ta, tb, trans_b, batch, astr, bstr, M, N, K, amat, bmat, cmat](TensorNode& node) {
        std::size_t nbatch = shape_numel(batch);
        const double* g = node.grad.data();
        const double* ad = ta.data().data();
        const double* bd = tb.data().data();
        double* ga = ta.requires_grad() ? ta.node()->grad_buffer() : nullptr;
        double* gb = tb.requires_grad() ? tb.node()->grad_buffer() : nullptr;
        std::vector<std::size_t> coords(batch.size(), 0);
        std::size_t ai = 0, bi = 0;
        for (std::size_t r = 0; r < nbatch; ++r) {
          const double* gslice = g + r * cmat;
          if (!trans_b) {
            // C = A B: dA = dC B^T, dB = A^T dC.
            if (ga) gemm(false, true, M, K, N, 1.0, gslice, bd + bi, 1.0, ga + ai);
            if (gb) gemm(true, false, K, N, M, 1.0, ad + ai, gslice, 1.0, gb + bi);
          } else {
            // C = A B^T: dA = dC B, dB = dC^T A.
            if (ga) gemm(false, false, M, K, N, 1.0, gslice, bd + bi, 1.0, ga + ai);
            if (gb) gemm(true, false, N, K, M, 1.0, gslice, ad + ai, 1.0, gb + bi);
          }
          for (std::size_t d = batch.size(); d-- > 0;) {
            if (++coords[d] < batch[d]) {
              ai += astr[d];
              bi += bstr[d];
              break;
            }
            coords[d] = 0;
            ai -= astr[d] * (batch[d] - 1);
            bi -= bstr[d] * (batch[d] - 1);
          }
        }
      });
}

}  // namespace detail

/// Batched matrix product [..., M, K] x [..., K, N]; leading dims broadcast.
inline Tensor matmul(const Tensor& a, const Tensor& b) { return detail::matmul_impl(a, b, false); }

/// Batched A B^T with b given as [..., N, K]; avoids materializing the
/// transpose for attention scores.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) { return detail::matmul_impl(a, b, true); }

inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const Shape& as = a.shape();
  std::size_t rank = as.size();
  if (perm.size() != rank) throw ShapeError("permute order must name every axis of " + shape_str(as));
  {
    std::vector<bool> seen(rank, false);
    for (std::size_t p : perm) {
      if (p >= rank || seen[p]) throw ShapeError("permute order is not a permutation");
      seen[p] = true;
    }
  }
  Shape rs(rank);
  for (std::size_t i = 0; i < rank; ++i) rs[i] = as[perm[i]];

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * as[i + 1];
  std::vector<std::size_t> walk(rank);
  for (std::size_t i = 0; i < rank; ++i) walk[i] = in_strides[perm[i]];

  std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* ad = a.data().data();
  {
    std::vector<std::size_t> coords(rank, 0);
    std::size_t ai = 0;
    for (std::size_t ri = 0; ri < n; ++ri) {
      out[ri] = ad[ai];
      for (std::size_t d = rank; d-- > 0;) {
        if (++coords[d] < rs[d]) {
          ai += walk[d];
          break;
        }
        coords[d] = 0;
        ai -= walk[d] * (rs[d] - 1);
      }
    }
  }
  Tensor ta = a;
  return detail::make_result(rs, std::move(out), {a}, [ta, rs, walk](TensorNode& node) {
    if (!ta.requires_grad()) return;
    double* ga = ta.node()->grad_buffer();
    const double* g = node.grad.data();
    std::size_t rank = rs.size();
    std::vector<std::size_t> coords(rank, 0);
    std::size_t ai = 0;
    for (std::size_t ri = 0; ri < node.grad.size(); ++ri) {
      ga[ai] += g[ri];
      for (std::size_t d = rank; d-- > 0;) {
        if (++coords[d] < rs[d]) {
          ai += walk[d];
          break;
        }
        coords[d] = 0;
        ai -= walk[d] * (rs[d] - 1);
      }
    }
  });
}

inline Tensor transpose_last2(const Tensor& a) {
  std::size_t rank = a.rank();
  if (rank < 2) throw ShapeError("transpose_last2 needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> perm(rank);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[rank - 2], perm[rank - 1]);
  return permute(a, perm);
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(new_shape) +
                     " changes element count");
  Tensor ta = a;
  std::vector<double> out = a.data();
  return detail::make_result(std::move(new_shape), std::move(out), {a}, [ta](TensorNode& node) {
    if (!ta.requires_grad()) return;
    ta.node()->accumulate_grad(node.grad);
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  std::size_t rank = first.size();
  if (axis >= rank) throw ShapeError("concat axis out of range for " + shape_str(first));
  Shape rs = first;
  rs[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& ps = p.shape();
    if (ps.size() != rank) throw ShapeError("concat rank mismatch");
    for (std::size_t i = 0; i < rank; ++i)
      if (i != axis && ps[i] != first[i])
        throw ShapeError("concat shapes differ off-axis: " + shape_str(first) + " vs " +
                         shape_str(ps));
    rs[axis] += ps[axis];
  }

  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= rs[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < rank; ++i) inner *= rs[i];
  std::size_t row = rs[axis] * inner;

  std::vector<double> out(shape_numel(rs));
  std::vector<std::size_t> offsets(parts.size());
  {
    std::size_t at = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = at;
      std::size_t span = parts[p].shape()[axis] * inner;
      const double* pd = parts[p].data().data();
      for (std::size_t o = 0; o < outer; ++o)
        std::copy(pd + o * span, pd + (o + 1) * span, out.data() + o * row + at);
      at += span;
    }
  }
  std::vector<Tensor> held = parts;
  return detail::make_result(rs, std::move(out), parts,
                             [held, offsets, outer, inner, row](TensorNode& node) {
                               const double* g = node.grad.data();
                               for (std::size_t p = 0; p < held.size(); ++p) {
                                 if (!held[p].requires_grad()) continue;
                                 double* gp = held[p].node()->grad_buffer();
                                 std::size_t span = held[p].numel() / outer;
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   const double* src = g + o * row + offsets[p];
                                   double* dst = gp + o * span;
                                   for (std::size_t i = 0; i < span; ++i) dst[i] += src[i];
                                 }
                               }
                             });
}

/// Contiguous sub-range [start, start+len) along one axis.
inline Tensor slice_axis(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
  const Shape& as = a.shape();
  if (axis >= as.size()) throw ShapeError("slice axis out of range for " + shape_str(as));
  if (start + len > as[axis])
    throw ShapeError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") exceeds axis extent " + std::to_string(as[axis]));
  Shape rs = as;
  rs[axis] = len;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
  for (std::size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];
  std::size_t in_row = as[axis] * inner, out_row = len * inner, off = start * inner;

  std::vector<double> out(shape_numel(rs));
  const double* ad = a.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(ad + o * in_row + off, ad + o * in_row + off + out_row, out.data() + o * out_row);
  Tensor ta = a;
  return detail::make_result(rs, std::move(out), {a},
                             [ta, outer, in_row, out_row, off](TensorNode& node) {
                               if (!ta.requires_grad()) return;
                               double* ga = ta.node()->grad_buffer();
                               const double* g = node.grad.data();
                               for (std::size_t o = 0; o < outer; ++o) {
                                 const double* src = g + o * out_row;
                                 double* dst = ga + o * in_row + off;
                                 for (std::size_t i = 0; i < out_row; ++i) dst[i] += src[i];
                               }
                             });
}

namespace detail {

inline Tensor reduce_axis(const Tensor& a, std::size_t axis, bool keepdim, bool mean) {
  const Shape& as = a.shape();
  if (axis >= as.size()) throw ShapeError("reduce axis out of range for " + shape_str(as));
  std::size_t outer = 1, inner = 1, mid = as[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= as[i];
  for (std::size_t i = axis + 1; i < as.size(); ++i) inner *= as[i];

  Shape rs;
  for (std::size_t i = 0; i < as.size(); ++i) {
    if (i == axis) {
      if (keepdim) rs.push_back(1);
    } else {
      rs.push_back(as[i]);
    }
  }
  if (rs.empty()) rs.push_back(1);

  double denom = mean ? static_cast<double>(mid) : 1.0;
  std::vector<double> out(outer * inner, 0.0);
  const double* ad = a.data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t m = 0; m < mid; ++m) {
      const double* src = ad + (o * mid + m) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  if (mean)
    for (double& v : out) v /= denom;

  Tensor ta = a;
  return make_result(rs, std::move(out), {a}, [ta, outer, inner, mid, denom](TensorNode& node) {
    if (!ta.requires_grad()) return;
    double* ga = ta.node()->grad_buffer();
    const double* g = node.grad.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t m = 0; m < mid; ++m) {
        const double* src = g + o * inner;
        double* dst = ga + (o * mid + m) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i] / denom;
      }
  });
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& a, std::size_t axis, bool keepdim = false) {
  return detail::reduce_axis(a, axis, keepdim, false);
}
inline Tensor mean_axis(const Tensor& a, std::size_t axis, bool keepdim = false) {
  return detail::reduce_axis(a, axis, keepdim, true);
}

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor ta = a;
  return detail::make_result(Shape{1}, {s}, {a}, [ta](TensorNode& node) {
    if (!ta.requires_grad()) return;
    double* ga = ta.node()->grad_buffer();
    double g = node.grad[0];
    for (std::size_t i = 0; i < ta.numel(); ++i) ga[i] += g;
  });
}

inline Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

/// Softmax over the last dimension, stabilized by the row max.
inline Tensor softmax_lastdim(const Tensor& a) {
  const Shape& as = a.shape();
  if (as.empty()) throw ShapeError("softmax on rank-0 tensor");
  std::size_t cols = as.back();
  std::size_t rows = a.numel() / cols;
  std::vector<double> out(a.numel());
  const double* ad = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = ad + r * cols;
    double* dst = out.data() + r * cols;
    double mx = src[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      dst[j] = std::exp(src[j] - mx);
      z += dst[j];
    }
    for (std::size_t j = 0; j < cols; ++j) dst[j] /= z;
  }
  Tensor ta = a;
  std::vector<double> saved = out;
  return detail::make_result(as, std::move(out), {a},
                             [ta, rows, cols, saved = std::move(saved)](TensorNode& node) {
                               if (!ta.requires_grad()) return;
                               double* ga = ta.node()->grad_buffer();
                               const double* g = node.grad.data();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = saved.data() + r * cols;
                                 const double* gy = g + r * cols;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < cols; ++j) dot += gy[j] * y[j];
                                 double* gx = ga + r * cols;
                                 for (std::size_t j = 0; j < cols; ++j) gx[j] += y[j] * (gy[j] - dot);
                               }
                             });
}

/// Softmax over the last dim of [B, H, Sq, Sk] scores restricted to permitted
/// keys. `mask2d` is [Sq, Sk] with nonzero = permitted; `key_valid` and
/// `query_valid` are [B, Sk] / [B, Sq] sequence-validity indicators. Masked
/// positions come out exactly zero. A padded query yields an all-zero row; a
/// real query with every key masked is a contract violation and throws.
inline Tensor masked_softmax(const Tensor& scores, const Tensor& mask2d = {},
                             const Tensor& key_valid = {}, const Tensor& query_valid = {}) {
  const Shape& ss = scores.shape();
  if (ss.size() != 4)
    throw ShapeError("masked_softmax expects [B, H, Sq, Sk] scores, got " + shape_str(ss));
  std::size_t B = ss[0], H = ss[1], Sq = ss[2], Sk = ss[3];
  if (mask2d.defined() && mask2d.shape() != Shape{Sq, Sk})
    throw ShapeError("mask2d must be [Sq, Sk] = [" + std::to_string(Sq) + "," + std::to_string(Sk) +
                     "], got " + shape_str(mask2d.shape()));
  if (key_valid.defined() && key_valid.shape() != Shape{B, Sk})
    throw ShapeError("key_valid must be [B, Sk], got " + shape_str(key_valid.shape()));
  if (query_valid.defined() && query_valid.shape() != Shape{B, Sq})
    throw ShapeError("query_valid must be [B, Sq], got " + shape_str(query_valid.shape()));

  const double* md = mask2d.defined() ? mask2d.data().data() : nullptr;
  const double* kv = key_valid.defined() ? key_valid.data().data() : nullptr;
  const double* qv = query_valid.defined() ? query_valid.data().data() : nullptr;

  std::vector<double> out(scores.numel(), 0.0);
  const double* sd = scores.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t q = 0; q < Sq; ++q) {
        std::size_t base = ((b * H + h) * Sq + q) * Sk;
        if (qv && qv[b * Sq + q] <= 0.5) continue;  // padded query: zero row
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < Sk; ++j) {
          bool ok = (!md || md[q * Sk + j] > 0.5) && (!kv || kv[b * Sk + j] > 0.5);
          if (ok) {
            any = true;
            mx = std::max(mx, sd[base + j]);
          }
        }
        if (!any)
          throw ContractError("attention row fully masked at batch " + std::to_string(b) +
                              ", head " + std::to_string(h) + ", query " + std::to_string(q));
        double z = 0.0;
        for (std::size_t j = 0; j < Sk; ++j) {
          bool ok = (!md || md[q * Sk + j] > 0.5) && (!kv || kv[b * Sk + j] > 0.5);
          if (ok) {
            out[base + j] = std::exp(sd[base + j] - mx);
            z += out[base + j];
          }
        }
        for (std::size_t j = 0; j < Sk; ++j) out[base + j] /= z;
      }

  Tensor ts = scores;
  std::vector<double> saved = out;
  std::size_t rows = B * H * Sq;
  return detail::make_result(ss, std::move(out), {scores},
                             [ts, rows, Sk, saved = std::move(saved)](TensorNode& node) {
                               if (!ts.requires_grad()) return;
                               double* gx = ts.node()->grad_buffer();
                               const double* g = node.grad.data();
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = saved.data() + r * Sk;
                                 const double* gy = g + r * Sk;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < Sk; ++j) dot += gy[j] * y[j];
                                 double* dst = gx + r * Sk;
                                 for (std::size_t j = 0; j < Sk; ++j) dst[j] += y[j] * (gy[j] - dot);
                               }
                             });
}

/// Layer normalization over the last dimension with affine parameters.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const Shape& xs = x.shape();
  if (xs.empty()) throw ShapeError("layer_norm on rank-0 tensor");
  std::size_t E = xs.back();
  if (gamma.shape() != Shape{E} || beta.shape() != Shape{E})
    throw ShapeError("layer_norm affine parameters must be [" + std::to_string(E) + "]");
  std::size_t rows = x.numel() / E;

  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_sigma(rows);
  const double* xd = x.data().data();
  const double* gd = gamma.data().data();
  const double* bd = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = xd + r * E;
    double mu = 0.0;
    for (std::size_t i = 0; i < E; ++i) mu += src[i];
    mu /= static_cast<double>(E);
    double var = 0.0;
    for (std::size_t i = 0; i < E; ++i) {
      double d = src[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(E);
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = is;
    double* xh = xhat.data() + r * E;
    double* dst = out.data() + r * E;
    for (std::size_t i = 0; i < E; ++i) {
      xh[i] = (src[i] - mu) * is;
      dst[i] = gd[i] * xh[i] + bd[i];
    }
  }

  Tensor tx = x, tg = gamma, tb = beta;
  return detail::make_result(
      xs, std::move(out), {x, gamma, beta},
      [tx, tg, tb, rows, E, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](TensorNode& node) {
        const double* g = node.grad.data();
        const double* gd = tg.data().data();
        double* gx = tx.requires_grad() ? tx.node()->grad_buffer() : nullptr;
        double* gg = tg.requires_grad() ? tg.node()->grad_buffer() : nullptr;
        double* gb = tb.requires_grad() ? tb.node()->grad_buffer() : nullptr;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gy = g + r * E;
          const double* xh = xhat.data() + r * E;
          if (gg || gb) {
            for (std::size_t i = 0; i < E; ++i) {
              if (gg) gg[i] += gy[i] * xh[i];
              if (gb) gb[i] += gy[i];
            }
          }
          if (gx) {
            double mean_h = 0.0, mean_hx = 0.0;
            for (std::size_t i = 0; i < E; ++i) {
              double hi = gy[i] * gd[i];
              mean_h += hi;
              mean_hx += hi * xh[i];
            }
            mean_h /= static_cast<double>(E);
            mean_hx /= static_cast<double>(E);
            double* dst = gx + r * E;
            for (std::size_t i = 0; i < E; ++i) {
              double hi = gy[i] * gd[i];
              dst[i] += inv_sigma[r] * (hi - mean_h - xh[i] * mean_hx);
            }
          }
        }
      });
}

/// Rows of `table` gathered by id; result shape is ids_shape + [E]. Gradient
/// scatter-adds into the table.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids,
                               const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding table must be [V, E], got " + shape_str(table.shape()));
  if (ids.size() != shape_numel(ids_shape))
    throw ShapeError("id count does not match ids_shape " + shape_str(ids_shape));
  std::size_t V = table.dim(0), E = table.dim(1);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] >= V)
      throw IndexError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " exceeds vocabulary size " + std::to_string(V));
  Shape rs = ids_shape;
  rs.push_back(E);
  std::vector<double> out(ids.size() * E);
  const double* td = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(td + ids[i] * E, td + (ids[i] + 1) * E, out.data() + i * E);
  Tensor tt = table;
  return detail::make_result(rs, std::move(out), {table}, [tt, ids, E](TensorNode& node) {
    if (!tt.requires_grad()) return;
    double* gt = tt.node()->grad_buffer();
    const double* g = node.grad.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = gt + ids[i] * E;
      const double* src = g + i * E;
      for (std::size_t e = 0; e < E; ++e) dst[e] += src[e];
    }
  });
}

/// x[:, pos, :] of a [B, S, E] tensor.
inline Tensor take_position(const Tensor& x, std::size_t pos) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("take_position expects [B, S, E], got " + shape_str(xs));
  std::size_t B = xs[0], S = xs[1], E = xs[2];
  if (pos >= S) throw IndexError("position " + std::to_string(pos) + " out of range for length " + std::to_string(S));
  std::vector<double> out(B * E);
  const double* xd = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    std::copy(xd + (b * S + pos) * E, xd + (b * S + pos + 1) * E, out.data() + b * E);
  Tensor tx = x;
  return detail::make_result(Shape{B, E}, std::move(out), {x}, [tx, pos, S, E](TensorNode& node) {
    if (!tx.requires_grad()) return;
    double* gx = tx.node()->grad_buffer();
    const double* g = node.grad.data();
    std::size_t B = node.grad.size() / E;
    for (std::size_t b = 0; b < B; ++b) {
      double* dst = gx + (b * S + pos) * E;
      const double* src = g + b * E;
      for (std::size_t e = 0; e < E; ++e) dst[e] += src[e];
    }
  });
}

/// Mean of the valid positions of x [B, S, E]; `valid` is [B, S] with nonzero
/// marking real tokens. Throws if a sequence has no valid position.
inline Tensor masked_mean_pool(const Tensor& x, const Tensor& valid) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("masked_mean_pool expects [B, S, E], got " + shape_str(xs));
  std::size_t B = xs[0], S = xs[1], E = xs[2];
  if (valid.shape() != Shape{B, S})
    throw ShapeError("valid must be [B, S], got " + shape_str(valid.shape()));
  const double* vd = valid.data().data();
  std::vector<double> counts(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t s = 0; s < S; ++s) counts[b] += vd[b * S + s] > 0.5 ? 1.0 : 0.0;
    if (counts[b] == 0.0)
      throw ContractError("sequence " + std::to_string(b) + " has no valid position to pool");
  }
  std::vector<double> out(B * E, 0.0);
  const double* xd = x.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t s = 0; s < S; ++s) {
      if (vd[b * S + s] <= 0.5) continue;
      const double* src = xd + (b * S + s) * E;
      double* dst = out.data() + b * E;
      for (std::size_t e = 0; e < E; ++e) dst[e] += src[e];
    }
    for (std::size_t e = 0; e < E; ++e) out[b * E + e] /= counts[b];
  }
  Tensor tx = x, tv = valid;
  return detail::make_result(Shape{B, E}, std::move(out), {x},
                             [tx, tv, S, E, counts = std::move(counts)](TensorNode& node) {
                               if (!tx.requires_grad()) return;
                               double* gx = tx.node()->grad_buffer();
                               const double* g = node.grad.data();
                               const double* vd = tv.data().data();
                               std::size_t B = counts.size();
                               for (std::size_t b = 0; b < B; ++b)
                                 for (std::size_t s = 0; s < S; ++s) {
                                   if (vd[b * S + s] <= 0.5) continue;
                                   double* dst = gx + (b * S + s) * E;
                                   const double* src = g + b * E;
                                   for (std::size_t e = 0; e < E; ++e) dst[e] += src[e] / counts[b];
                                 }
                             });
}

}  // namespace wadn
