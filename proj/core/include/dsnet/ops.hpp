#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dsnet/tensor.hpp"

namespace dsnet {

// Differentiable operations. Each records itself on the active Tape<T> (if
// any) together with its multiply-accumulate count, which is how the FLOP
// profiler cross-checks the analytic complexity model.
//
// MAC conventions: conv and linear count multiply-accumulates (bias excluded);
// attention counts both matmuls plus one op per softmax entry; norms,
// activations, add/sub and interpolation count one op per output element;
// layout permutations and concat count nothing.

enum class ConvAlgo { kAuto, kDirect, kIm2col };

/// Convolution hyperparameters plus the weight (out, in/groups, kH, kW) and an
/// optional bias (out).
template <typename T>
struct ConvParams {
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel_h = 1;
  std::int64_t kernel_w = 1;
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
  Tensor<T> weight;
  Tensor<T> bias;

  void validate() const;
};

std::int64_t conv_output_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                std::int64_t padding);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p, ConvAlgo algo = ConvAlgo::kAuto);

/// Running statistics owned by a batch-norm layer. `batches_tracked` holds a
/// single element counting train-mode updates.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  Tensor<T> batches_tracked;

  static BatchNormState create(std::int64_t channels);
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Train mode normalizes with batch statistics (biased variance) and updates
/// the running statistics with the unbiased variance. Eval mode uses the
/// running statistics and fails if none were ever recorded.
template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>& state, bool training, BatchNormOptions opts = {});

enum class Activation { kRelu, kGelu };

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind);
template <typename T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, Activation::kRelu); }
/// Exact erf formulation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) { return activation(x, Activation::kGelu); }

/// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps);

/// Bilinear resize of an NCHW tensor with half-pixel centers (align_corners
/// false); source coordinates below zero clamp to the first pixel.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::int64_t scale);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
/// Elementwise product of equally shaped tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// Concatenates NCHW tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs);

/// y = x W^T + b over the last axis; weight is (out, in), bias (out) optional.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// softmax(q k^T / sqrt(d)) v for q (N, heads, L, d), k (N, heads, Lk, d) and
/// v (N, heads, Lk, dv).
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);
/// The softmax weights of attention(), (N, heads, L, Lk). Not recorded.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k);

/// (N, C, H, W) -> (N, H*W, C).
template <typename T>
Tensor<T> tokens_from_map(const Tensor<T>& x);
/// (N, H*W, C) -> (N, C, H, W).
template <typename T>
Tensor<T> map_from_tokens(const Tensor<T>& tokens, std::int64_t h, std::int64_t w);
/// (N, L, heads*d) -> (N, heads, L, d).
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::int64_t heads);
/// (N, heads, L, d) -> (N, L, heads*d).
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Elementwise conversion between scalar types; not differentiable.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> out(x.values().begin(), x.values().end());
  return Tensor<To>(x.shape(), std::move(out));
}

}  // namespace dsnet
