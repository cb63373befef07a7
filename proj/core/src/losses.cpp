#include "dsnet/losses.hpp"

#include <cmath>

#include "dsnet/error.hpp"
#include "dsnet/ops.hpp"

namespace dsnet {

namespace {

template <typename T>
void check_pair(const char* what, const Tensor<T>& logits, const Tensor<T>& target) {
  if (logits.shape() != target.shape()) {
    throw ConfigError(std::string(what) + ": logits " + shape_string(logits.shape()) + " vs target " +
                      shape_string(target.shape()));
  }
  if (logits.numel() == 0) throw ConfigError(std::string(what) + ": empty input");
  for (auto t : target.values()) {
    if (t != T{0} && t != T{1}) throw ConfigError(std::string(what) + ": target values must be 0 or 1");
  }
}

template <typename T>
T sigmoid(T z) {
  if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

}  // namespace

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& target) {
  check_pair("bce_loss", logits, target);
  const auto n = logits.numel();
  const T* z = logits.data();
  const T* t = target.data();
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double zi = z[i];
    acc += std::max(zi, 0.0) - zi * t[i] + std::log1p(std::exp(-std::abs(zi)));
  }
  Tensor<T> zl = logits, tl = target;
  return record_op<T>("bce_loss", {logits}, Tensor<T>::scalar(static_cast<T>(acc / n)),
                      static_cast<std::uint64_t>(n), [zl, tl, n](std::span<const T> dy) mutable {
                        std::vector<T> g(static_cast<std::size_t>(n));
                        const T share = dy[0] / static_cast<T>(n);
                        for (std::int64_t i = 0; i < n; ++i) g[i] = (sigmoid(zl.data()[i]) - tl.data()[i]) * share;
                        accumulate_grad<T>(zl, g);
                      });
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const Tensor<T>& target, double smooth) {
  check_pair("dice_loss", logits, target);
  if (!(smooth >= 0.0)) throw ConfigError("dice_loss: smoothing must be non-negative");
  const auto n = logits.numel();
  std::vector<double> p(static_cast<std::size_t>(n));
  double inter = 0.0, psum = 0.0, tsum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    p[i] = sigmoid<double>(logits.data()[i]);
    inter += p[i] * target.data()[i];
    psum += p[i];
    tsum += target.data()[i];
  }
  const double num = 2.0 * inter + smooth, den = psum + tsum + smooth;
  if (den == 0.0) throw NumericError("dice_loss: zero denominator (set a positive smoothing term)");
  Tensor<T> zl = logits, tl = target;
  return record_op<T>("dice_loss", {logits}, Tensor<T>::scalar(static_cast<T>(1.0 - num / den)),
                      static_cast<std::uint64_t>(n),
                      [zl, tl, p = std::move(p), num, den, n](std::span<const T> dy) mutable {
                        std::vector<T> g(static_cast<std::size_t>(n));
                        const double d2 = den * den;
                        for (std::int64_t i = 0; i < n; ++i) {
                          const double dp = -(2.0 * tl.data()[i] * den - num) / d2;
                          g[i] = static_cast<T>(dy[0] * dp * p[i] * (1.0 - p[i]));
                        }
                        accumulate_grad<T>(zl, g);
                      });
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& logits, const Tensor<T>& target, const LossConfig& cfg) {
  NameScope scope("loss");
  auto b = bce_loss(logits, target);
  auto d = dice_loss(logits, target, cfg.dice_smooth);
  if (cfg.bce_weight != 1.0) b = scale(b, static_cast<T>(cfg.bce_weight));
  if (cfg.dice_weight != 1.0) d = scale(d, static_cast<T>(cfg.dice_weight));
  return add(b, d);
}

#define DSNET_INSTANTIATE(T)                                                             \
  template Tensor<T> bce_loss<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> dice_loss<T>(const Tensor<T>&, const Tensor<T>&, double);           \
  template Tensor<T> combined_loss<T>(const Tensor<T>&, const Tensor<T>&, const LossConfig&);

DSNET_INSTANTIATE(float)
DSNET_INSTANTIATE(double)
#undef DSNET_INSTANTIATE

}  // namespace dsnet
