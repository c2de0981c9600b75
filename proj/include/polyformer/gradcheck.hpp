#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "polyformer/ops.hpp"
#include "polyformer/tensor.hpp"

namespace polyformer {

// Central-difference verification oracle. `f` must be a deterministic scalar
// function of the tensors in `points` (it may capture them; the argument-free
// form keeps layer closures simple). Runs at the precision of T; use double
// for trustworthy comparisons.
//
// Returns max over coordinates of |analytic - numeric| /
// max(|analytic|, |numeric|, 1e-8).
template <typename T>
double grad_check(const std::function<TensorT<T>()>& f, std::vector<TensorT<T>> points,
                  T eps = static_cast<T>(1e-5)) {
  std::vector<bool> saved_rg;
  saved_rg.reserve(points.size());
  for (auto& p : points) {
    saved_rg.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }

  std::vector<std::vector<T>> analytic;
  {
    TapeT<T> tape;
    TapeScopeT<T> scope(tape);
    auto loss = f();
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      throw NumericError("grad_check: non-finite loss at base point");
    }
    backward(loss);
    for (auto& p : points) {
      p.node().ensure_grad();
      analytic.push_back(p.grad());
    }
  }

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < points.size(); ++pi) {
    auto& p = points[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T orig = p.data()[i];
      p.data()[i] = orig + eps;
      const double lp = static_cast<double>(f().item());
      p.data()[i] = orig - eps;
      const double lm = static_cast<double>(f().item());
      p.data()[i] = orig;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        throw NumericError("grad_check: non-finite loss at perturbed point");
      }
      const double numeric = (lp - lm) / (2.0 * static_cast<double>(eps));
      const double a = static_cast<double>(analytic[pi][i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
    }
  }

  for (std::size_t i = 0; i < points.size(); ++i) {
    points[i].zero_grad();
    points[i].set_requires_grad(saved_rg[i]);
  }
  return max_rel;
}

}  // namespace polyformer
