#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "wadn/tensor.hpp"

namespace wadn {

struct GradCheckReport {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients against central differences. `loss_fn`
/// must rebuild the scalar loss from the current contents of `params` each
/// call. The relative error uses a 1e-4 floor so near-zero gradient pairs
/// compare absolutely. `max_per_tensor` strides through large tensors instead
/// of probing every element; 0 probes all.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_fn,
                                  std::vector<Tensor> params, double h = 1e-5,
                                  std::size_t max_per_tensor = 0) {
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor loss = loss_fn();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor& p : params) analytic.push_back(p.grad().data());

  GradCheckReport rep;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<double>& data = params[pi].mutable_data();
    std::size_t n = data.size();
    std::size_t step = 1;
    if (max_per_tensor > 0 && n > max_per_tensor) step = (n + max_per_tensor - 1) / max_per_tensor;
    for (std::size_t i = 0; i < n; i += step) {
      double orig = data[i];
      data[i] = orig + h;
      double lp = loss_fn().item();
      data[i] = orig - h;
      double lm = loss_fn().item();
      data[i] = orig;
      double numeric = (lp - lm) / (2.0 * h);
      double a = analytic[pi][i];
      double rel = std::abs(a - numeric) / std::max(std::max(std::abs(a), std::abs(numeric)), 1e-4);
      if (rel > rep.max_rel) rep.max_rel = rel;
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace wadn
