#include "dsnet/decoder.hpp"

#include "dsnet/error.hpp"

namespace dsnet {

template <typename T>
DSAModule<T>::DSAModule(std::int64_t in_channels, std::int64_t next_channels,
                        std::int64_t out_channels, DSAConfig cfg, Rng& rng)
    : cfg_(cfg) {
  if (cfg_.is_baseline()) {
    base_ = this->register_module("conv", std::make_shared<ConvBR<T>>(in_channels, out_channels, 3, rng));
    return;
  }
  higher_ = this->register_module("higher", std::make_shared<ConvBR<T>>(next_channels, in_channels, 3, rng));
  if (cfg_.enable_fpsa) {
    fpsa_ = this->register_module("fpsa", std::make_shared<ConvBR<T>>(in_channels, out_channels, 3, rng));
  }
  if (cfg_.enable_fnsa) {
    fnsa_ = this->register_module("fnsa", std::make_shared<ConvBR<T>>(in_channels, out_channels, 3, rng));
  }
  const std::int64_t branches = (cfg_.enable_fpsa ? 1 : 0) + (cfg_.enable_fnsa ? 1 : 0);
  fuse_ = this->register_module("fuse", std::make_shared<ConvBR<T>>(branches * out_channels, out_channels, 3, rng));
}

template <typename T>
Tensor<T> DSAModule<T>::forward(const Tensor<T>& f, const Tensor<T>& o_next) {
  NameScope scope(this->local_name());
  if (f.rank() != 4 || o_next.rank() != 4 || o_next.dim(0) != f.dim(0) ||
      o_next.dim(2) * 2 != f.dim(2) || o_next.dim(3) * 2 != f.dim(3)) {
    throw ConfigError("dsa: higher-level map " + shape_string(o_next.shape()) +
                      " must have half the spatial extent of " + shape_string(f.shape()));
  }
  if (base_) return base_->forward(f);

  auto h = higher_->forward(upsample_bilinear(o_next, 2));
  Tensor<T> p, n;
  if (fpsa_) {
    NameScope branch("fpsa_stream");
    p = fpsa_->forward(sub(f, h));
  }
  if (fnsa_) {
    NameScope branch("fnsa_stream");
    n = fnsa_->forward(add(f, h));
  }
  if (p.defined() && n.defined()) return fuse_->forward(concat_channels<T>({p, n}));
  return fuse_->forward(p.defined() ? p : n);
}

template <typename T>
FusionHead<T>::FusionHead(const DecoderConfig& cfg, Rng& rng) {
  fuse_ = this->register_module("fuse", std::make_shared<ConvBR<T>>(cfg.fused_channels(), cfg.head_channels, 3, rng));
  typename Conv2d<T>::Options o;
  o.kernel = 3;
  o.padding = 1;
  classifier_ = this->register_module("classifier", std::make_shared<Conv2d<T>>(cfg.head_channels, cfg.num_classes, o, rng));
}

template <typename T>
Tensor<T> FusionHead<T>::forward(const std::array<Tensor<T>, 4>& levels) {
  NameScope scope(this->local_name());
  const auto h1 = levels[0].dim(2), w1 = levels[0].dim(3);
  std::vector<Tensor<T>> parts{levels[0]};
  for (int i = 1; i < 4; ++i) {
    const std::int64_t factor = std::int64_t{1} << i;
    if (levels[i].dim(2) * factor != h1 || levels[i].dim(3) * factor != w1) {
      throw ConfigError("fusion head: level " + std::to_string(i + 1) + " map " +
                        shape_string(levels[i].shape()) + " is not 1/" + std::to_string(factor) +
                        " of level 1");
    }
    parts.push_back(upsample_bilinear(levels[i], factor));
  }
  auto x = fuse_->forward(concat_channels(parts));
  return upsample_bilinear(classifier_->forward(x), 4);
}

template <typename T>
PyramidDecoder<T>::PyramidDecoder(const Stages& encoder_dims, const DecoderConfig& cfg, DSAConfig dsa,
                                  Rng& rng) {
  cfg.validate();
  for (int i = 0; i < 4; ++i) {
    reduce_[i] = this->register_module("reduce" + std::to_string(i + 1),
                                       std::make_shared<ConvBR<T>>(encoder_dims[i], cfg.reduced_channels[i], 1, rng));
  }
  top_ = this->register_module("top", std::make_shared<ConvBR<T>>(cfg.reduced_channels[3], cfg.level_channels[3], 3, rng));
  for (int level = 3; level >= 1; --level) {
    const int i = level - 1;
    dsa_[i] = this->register_module(
        "dsa" + std::to_string(level),
        std::make_shared<DSAModule<T>>(cfg.reduced_channels[i], cfg.level_channels[i + 1],
                                       cfg.level_channels[i], dsa, rng));
  }
  head_ = this->register_module("head", std::make_shared<FusionHead<T>>(cfg, rng));
}

template <typename T>
DecoderOutput<T> PyramidDecoder<T>::forward(const EncoderOutput<T>& features) {
  NameScope scope(this->local_name());
  DecoderOutput<T> out;
  for (int i = 0; i < 4; ++i) out.reduced[i] = reduce_[i]->forward(features.features[i]);
  out.levels[3] = top_->forward(out.reduced[3]);
  for (int i = 2; i >= 0; --i) out.levels[i] = dsa_[i]->forward(out.reduced[i], out.levels[i + 1]);
  out.logits = head_->forward(out.levels);
  return out;
}

template <typename T>
DSNet<T>::DSNet(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  encoder_ = this->register_module("encoder", std::make_shared<MiTEncoder<T>>(cfg_.encoder, rng));
  decoder_ = this->register_module(
      "decoder", std::make_shared<PyramidDecoder<T>>(cfg_.encoder.embed_dims, cfg_.decoder, cfg_.dsa, rng));
}

template <typename T>
DSNetOutput<T> DSNet<T>::forward_all(const Tensor<T>& image) {
  NameScope scope(this->local_name());
  DSNetOutput<T> out;
  out.encoder = encoder_->forward(image);
  out.decoder = decoder_->forward(out.encoder);
  return out;
}

#define DSNET_INSTANTIATE(T)          \
  template class DSAModule<T>;        \
  template class FusionHead<T>;       \
  template class PyramidDecoder<T>;   \
  template class DSNet<T>;

DSNET_INSTANTIATE(float)
DSNET_INSTANTIATE(double)
#undef DSNET_INSTANTIATE

}  // namespace dsnet
