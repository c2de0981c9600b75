#pragma once

#include <cstdint>
#include <vector>

#include "polyformer/ops.hpp"

namespace polyformer {

namespace detail {

template <typename T>
inline void check_probs_labels(const TensorT<T>& probs, const std::vector<std::uint8_t>& labels) {
  if (probs.rank() != 4) {
    throw DimensionError("dice_loss: expected [BxCxHxW] probabilities, got " +
                         shape_str(probs.shape()));
  }
  if (labels.size() != probs.dim(0) * probs.dim(2) * probs.dim(3)) {
    throw DimensionError("dice_loss: label count " + std::to_string(labels.size()) +
                         " does not match " + shape_str(probs.shape()));
  }
}

}  // namespace detail

// Soft dice loss over the foreground classes (1..C-1), smoothing s, averaged
// over classes and batch items. `probs` must already be softmax outputs.
template <typename T>
TensorT<T> dice_loss(const TensorT<T>& probs, const std::vector<std::uint8_t>& labels,
                     T smooth = T(1)) {
  detail::check_probs_labels(probs, labels);
  const std::size_t B = probs.dim(0), C = probs.dim(1), HW = probs.dim(2) * probs.dim(3);
  if (C < 2) throw DimensionError("dice_loss: needs at least 2 classes");

  std::vector<T> onehot(B * C * HW, T(0));
  std::vector<T> ysum(B * C, T(0));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < HW; ++p) {
      const std::uint8_t y = labels[b * HW + p];
      if (y >= C) throw ContractError("dice_loss: label out of range");
      onehot[(b * C + y) * HW + p] = T(1);
      ysum[b * C + y] += T(1);
    }
  }
  auto onehot_t = TensorT<T>::from_data(probs.shape(), std::move(onehot));
  auto ysum_t = TensorT<T>::from_data({B, C}, std::move(ysum));

  auto inter = sum_hw(mul(probs, onehot_t));                    // [B,C]
  auto psum = sum_hw(probs);                                    // [B,C]
  auto num = add_const(scale(inter, T(2)), smooth);
  auto den = add_const(add(psum, ysum_t), smooth);
  auto dice = div(num, den);                                    // [B,C]

  // Mean over foreground entries only.
  std::vector<T> w(B * C, T(0));
  const T inv = T(1) / static_cast<T>(B * (C - 1));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 1; c < C; ++c) w[b * C + c] = inv;
  return add_const(scale(weighted_sum(dice, std::move(w)), T(-1)), T(1));
}

// Mean pixel-wise cross-entropy from raw logits.
template <typename T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<std::uint8_t>& labels) {
  return nll_mean(log_softmax_axis(logits, 1), labels);
}

// 0.5 * CE + 0.5 * dice, computed off one shared log-softmax.
template <typename T>
TensorT<T> composite_loss(const TensorT<T>& logits, const std::vector<std::uint8_t>& labels) {
  auto logp = log_softmax_axis(logits, 1);
  auto ce = nll_mean(logp, labels);
  auto dl = dice_loss(polyformer::exp(logp), labels);
  return scale(add(ce, dl), T(0.5));
}

}  // namespace polyformer
