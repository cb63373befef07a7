#pragma once

#include <array>
#include <memory>

#include "dsnet/config.hpp"
#include "dsnet/encoder.hpp"
#include "dsnet/module.hpp"

namespace dsnet {

/// Dual-stream attention module for one pyramid level.
///
/// With both branches: h = BR(conv3x3(up2(o_next))) maps the higher-level
/// output to this level's reduced width; the false-positive branch convolves
/// f - h, the false-negative branch f + h, and a 3x3 conv + BR fuses their
/// concatenation. A single branch skips the concat. The baseline (both
/// disabled) is BR(conv3x3(f)) and ignores o_next.
template <typename T>
class DSAModule : public Module<T> {
 public:
  DSAModule(std::int64_t in_channels, std::int64_t next_channels, std::int64_t out_channels,
            DSAConfig cfg, Rng& rng);
  /// `o_next` must have exactly half the spatial extent of `f`.
  Tensor<T> forward(const Tensor<T>& f, const Tensor<T>& o_next);

  const DSAConfig& config() const { return cfg_; }
  /// Null when the corresponding path is absent from this variant.
  ConvBR<T>* higher_path() { return higher_.get(); }
  ConvBR<T>* fpsa() { return fpsa_.get(); }
  ConvBR<T>* fnsa() { return fnsa_.get(); }
  ConvBR<T>* fuse() { return fuse_.get(); }
  ConvBR<T>* baseline() { return base_.get(); }

 private:
  DSAConfig cfg_;
  std::shared_ptr<ConvBR<T>> higher_, fpsa_, fnsa_, fuse_, base_;
};

/// Upsamples o2..o4 to o1's grid, concatenates, then conv3x3 + BR and a plain
/// conv3x3 classifier; logits are upsampled x4 to the input resolution.
template <typename T>
class FusionHead : public Module<T> {
 public:
  FusionHead(const DecoderConfig& cfg, Rng& rng);
  Tensor<T> forward(const std::array<Tensor<T>, 4>& levels);

  Conv2d<T>& classifier() { return *classifier_; }

 private:
  std::shared_ptr<ConvBR<T>> fuse_;
  std::shared_ptr<Conv2d<T>> classifier_;
};

/// Intermediate results of one decoder pass.
template <typename T>
struct DecoderOutput {
  std::array<Tensor<T>, 4> reduced;  // 1x1-reduced encoder features
  std::array<Tensor<T>, 4> levels;   // o1..o4
  Tensor<T> logits;
};

template <typename T>
class PyramidDecoder : public Module<T> {
 public:
  PyramidDecoder(const Stages& encoder_dims, const DecoderConfig& cfg, DSAConfig dsa, Rng& rng);
  DecoderOutput<T> forward(const EncoderOutput<T>& features);

  /// Level 1..3 DSA modules.
  DSAModule<T>& dsa(int level) { return *dsa_.at(static_cast<std::size_t>(level - 1)); }
  ConvBR<T>& top() { return *top_; }
  ConvBR<T>& reduce(int level) { return *reduce_.at(static_cast<std::size_t>(level - 1)); }
  FusionHead<T>& head() { return *head_; }

 private:
  std::array<std::shared_ptr<ConvBR<T>>, 4> reduce_;
  std::shared_ptr<ConvBR<T>> top_;
  std::array<std::shared_ptr<DSAModule<T>>, 3> dsa_;
  std::shared_ptr<FusionHead<T>> head_;
};

template <typename T>
struct DSNetOutput {
  EncoderOutput<T> encoder;
  DecoderOutput<T> decoder;
};

/// Transformer encoder plus DSA pyramid decoder. forward() returns raw logits
/// (N, 1, H, W); the sigmoid belongs to the loss and metrics.
template <typename T>
class DSNet : public Module<T> {
 public:
  DSNet(const ModelConfig& cfg, Rng& rng);

  Tensor<T> forward(const Tensor<T>& image) { return forward_all(image).decoder.logits; }
  DSNetOutput<T> forward_all(const Tensor<T>& image);

  const ModelConfig& config() const { return cfg_; }
  MiTEncoder<T>& encoder() { return *encoder_; }
  PyramidDecoder<T>& decoder() { return *decoder_; }

 private:
  ModelConfig cfg_;
  std::shared_ptr<MiTEncoder<T>> encoder_;
  std::shared_ptr<PyramidDecoder<T>> decoder_;
};

}  // namespace dsnet
