#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <vector>

#include "dsnet/config.hpp"
#include "dsnet/module.hpp"

namespace dsnet {

template <typename T>
struct TokenMap {
  Tensor<T> tokens;  // (N, H*W, C)
  std::int64_t height = 0;
  std::int64_t width = 0;
};

/// Strided convolution with kernel larger than its stride, then layer norm
/// over token features.
template <typename T>
class OverlapPatchEmbed : public Module<T> {
 public:
  OverlapPatchEmbed(std::int64_t in, std::int64_t dim, std::int64_t kernel, std::int64_t stride,
                    std::int64_t padding, double eps, Rng& rng);
  TokenMap<T> forward(const Tensor<T>& x);

 private:
  std::shared_ptr<Conv2d<T>> proj_;
  std::shared_ptr<LayerNorm<T>> norm_;
};

/// Multi-head self-attention whose keys and values come from a map reduced
/// by an R x R stride-R convolution (R = 1 disables the reduction).
template <typename T>
class EfficientSelfAttention : public Module<T> {
 public:
  EfficientSelfAttention(std::int64_t dim, std::int64_t heads, std::int64_t sr_ratio, double eps, Rng& rng);
  Tensor<T> forward(const Tensor<T>& tokens, std::int64_t h, std::int64_t w);

  std::int64_t heads() const { return heads_; }
  std::int64_t sr_ratio() const { return sr_ratio_; }
  Linear<T>& query() { return *q_; }
  Linear<T>& key() { return *k_; }
  Linear<T>& value() { return *v_; }
  Linear<T>& proj() { return *proj_; }

 private:
  std::int64_t heads_, sr_ratio_;
  std::shared_ptr<Linear<T>> q_, k_, v_, proj_;
  std::shared_ptr<Conv2d<T>> sr_;
  std::shared_ptr<LayerNorm<T>> sr_norm_;
};

/// Linear expand, 3x3 depthwise conv, GELU, linear project. The residual is
/// added by the caller.
template <typename T>
class MixFFN : public Module<T> {
 public:
  MixFFN(std::int64_t dim, std::int64_t hidden, Rng& rng);
  Tensor<T> forward(const Tensor<T>& tokens, std::int64_t h, std::int64_t w);

  Linear<T>& fc1() { return *fc1_; }
  Linear<T>& fc2() { return *fc2_; }
  Conv2d<T>& dwconv() { return *dw_; }

 private:
  std::shared_ptr<Linear<T>> fc1_, fc2_;
  std::shared_ptr<Conv2d<T>> dw_;
};

template <typename T>
class TransformerBlock : public Module<T> {
 public:
  TransformerBlock(std::int64_t dim, std::int64_t heads, std::int64_t sr_ratio,
                   std::int64_t mlp_ratio, double eps, Rng& rng);
  Tensor<T> forward(const Tensor<T>& tokens, std::int64_t h, std::int64_t w);

 private:
  std::shared_ptr<LayerNorm<T>> norm1_, norm2_;
  std::shared_ptr<EfficientSelfAttention<T>> attn_;
  std::shared_ptr<MixFFN<T>> ffn_;
};

/// f1..f4 at strides 4, 8, 16, 32.
template <typename T>
struct EncoderOutput {
  std::array<Tensor<T>, 4> features;
};

/// Four-stage hierarchical Transformer backbone. No position embedding.
template <typename T>
class MiTEncoder : public Module<T> {
 public:
  MiTEncoder(const MiTConfig& cfg, Rng& rng);
  /// Requires H and W divisible by the total stride (32).
  EncoderOutput<T> forward(const Tensor<T>& image);

  const MiTConfig& config() const { return cfg_; }

 private:
  struct Stage {
    std::shared_ptr<OverlapPatchEmbed<T>> embed;
    std::vector<std::shared_ptr<TransformerBlock<T>>> blocks;
    std::shared_ptr<LayerNorm<T>> norm;
  };
  MiTConfig cfg_;
  std::array<Stage, 4> stages_;
};

template <typename T>
void save_backbone_weights(const MiTEncoder<T>& encoder, const std::filesystem::path& path);
/// Assigns every encoder parameter from a weight manifest. Any missing,
/// unexpected or mis-shaped entry aborts the load before anything changes.
template <typename T>
void load_backbone_weights(MiTEncoder<T>& encoder, const std::filesystem::path& path);

}  // namespace dsnet
