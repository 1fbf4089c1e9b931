#pragma once

// Reference implementations used only by tests: written straight from the
// definitions, favoring clarity over speed, so the library is checked against
// an independent route.

#include <cmath>
#include <cstddef>
#include <set>
#include <utility>
#include <vector>

namespace oracle {

inline std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                                      std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

inline std::vector<double> softmax_ref(const std::vector<double>& row) {
  long double mx = row[0];
  for (double v : row) mx = std::max<long double>(mx, v);
  long double z = 0.0L;
  std::vector<long double> e(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(row[i]) - mx);
    z += e[i];
  }
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = static_cast<double>(e[i] / z);
  return out;
}

inline std::vector<double> layer_norm_ref(const std::vector<double>& row,
                                          const std::vector<double>& gamma,
                                          const std::vector<double>& beta, double eps) {
  std::size_t n = row.size();
  long double mu = 0.0L;
  for (double v : row) mu += v;
  mu /= n;
  long double var = 0.0L;
  for (double v : row) var += (v - mu) * (v - mu);
  var /= n;
  long double is = 1.0L / std::sqrt(var + static_cast<long double>(eps));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<double>(gamma[i] * ((row[i] - mu) * is) + beta[i]);
  return out;
}

/// Permitted (query, key) pairs per mechanism, as plain set comprehensions.
inline std::set<std::pair<std::size_t, std::size_t>> local_block_pairs(std::size_t s, std::size_t block) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j)
      if (i / block == j / block) out.emplace(i, j);
  return out;
}

inline std::set<std::pair<std::size_t, std::size_t>> sliding_window_pairs(std::size_t s, std::size_t window) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  std::size_t half = window / 2;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      std::size_t d = i > j ? i - j : j - i;
      if (d <= half) out.emplace(i, j);
    }
  return out;
}

inline std::set<std::pair<std::size_t, std::size_t>> strided_sparse_pairs(std::size_t s, std::size_t block,
                                                                          std::size_t stride) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < s; ++j)
      if (i / block == j / block || i % stride == j % stride) out.emplace(i, j);
  return out;
}

}  // namespace oracle
