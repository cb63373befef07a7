#pragma once

#include "dsnet/tensor.hpp"

namespace dsnet {

struct LossConfig {
  double bce_weight = 1.0;
  double dice_weight = 1.0;
  double dice_smooth = 1.0;
};

/// Mean sigmoid cross-entropy over all elements, evaluated as
/// max(z, 0) - z t + log(1 + exp(-|z|)) so large logits never overflow.
/// Targets must be exactly 0 or 1.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& target);

/// Soft Dice over the whole tensor: 1 - (2 sum(p t) + eps) / (sum p + sum t + eps)
/// with p = sigmoid(logits).
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const Tensor<T>& target, double smooth = 1.0);

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const Tensor<T>& target, const LossConfig& cfg = {});

}  // namespace dsnet
