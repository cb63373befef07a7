#include "dsnet/encoder.hpp"

#include <cmath>

#include "dsnet/error.hpp"

namespace dsnet {

template <typename T>
OverlapPatchEmbed<T>::OverlapPatchEmbed(std::int64_t in, std::int64_t dim, std::int64_t kernel,
                                        std::int64_t stride, std::int64_t padding, double eps,
                                        Rng& rng) {
  typename Conv2d<T>::Options o;
  o.kernel = kernel;
  o.stride = stride;
  o.padding = padding;
  proj_ = this->register_module("proj", std::make_shared<Conv2d<T>>(in, dim, o, rng));
  norm_ = this->register_module("norm", std::make_shared<LayerNorm<T>>(dim, eps));
}

template <typename T>
TokenMap<T> OverlapPatchEmbed<T>::forward(const Tensor<T>& x) {
  NameScope scope(this->local_name());
  auto map = proj_->forward(x);
  const auto h = map.dim(2), w = map.dim(3);
  return {norm_->forward(tokens_from_map(map)), h, w};
}

template <typename T>
EfficientSelfAttention<T>::EfficientSelfAttention(std::int64_t dim, std::int64_t heads,
                                                  std::int64_t sr_ratio, double eps, Rng& rng)
    : heads_(heads), sr_ratio_(sr_ratio) {
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by heads " +
                      std::to_string(heads));
  }
  if (sr_ratio < 1) throw ConfigError("attention: sr_ratio must be >= 1");
  q_ = this->register_module("q", std::make_shared<Linear<T>>(dim, dim, rng));
  k_ = this->register_module("k", std::make_shared<Linear<T>>(dim, dim, rng));
  v_ = this->register_module("v", std::make_shared<Linear<T>>(dim, dim, rng));
  proj_ = this->register_module("proj", std::make_shared<Linear<T>>(dim, dim, rng));
  if (sr_ratio > 1) {
    typename Conv2d<T>::Options o;
    o.kernel = sr_ratio;
    o.stride = sr_ratio;
    o.padding = 0;
    sr_ = this->register_module("sr", std::make_shared<Conv2d<T>>(dim, dim, o, rng));
    sr_norm_ = this->register_module("sr_norm", std::make_shared<LayerNorm<T>>(dim, eps));
  }
}

template <typename T>
Tensor<T> EfficientSelfAttention<T>::forward(const Tensor<T>& tokens, std::int64_t h, std::int64_t w) {
  NameScope scope(this->local_name());
  if (tokens.rank() != 3 || tokens.dim(1) != h * w) {
    throw ConfigError("attention: token tensor " + shape_string(tokens.shape()) + " does not match " +
                      std::to_string(h) + "x" + std::to_string(w) + " map");
  }
  if (h % sr_ratio_ != 0 || w % sr_ratio_ != 0) {
    throw ConfigError("attention: map " + std::to_string(h) + "x" + std::to_string(w) +
                      " not divisible by reduction ratio " + std::to_string(sr_ratio_));
  }
  auto q = split_heads(q_->forward(tokens), heads_);
  Tensor<T> kv_src = tokens;
  if (sr_) {
    kv_src = sr_norm_->forward(tokens_from_map(sr_->forward(map_from_tokens(tokens, h, w))));
  }
  auto k = split_heads(k_->forward(kv_src), heads_);
  auto v = split_heads(v_->forward(kv_src), heads_);
  return proj_->forward(merge_heads(attention(q, k, v)));
}

template <typename T>
MixFFN<T>::MixFFN(std::int64_t dim, std::int64_t hidden, Rng& rng) {
  fc1_ = this->register_module("fc1", std::make_shared<Linear<T>>(dim, hidden, rng));
  typename Conv2d<T>::Options o;
  o.kernel = 3;
  o.padding = 1;
  o.groups = hidden;
  dw_ = this->register_module("dwconv", std::make_shared<Conv2d<T>>(hidden, hidden, o, rng));
  fc2_ = this->register_module("fc2", std::make_shared<Linear<T>>(hidden, dim, rng));
}

template <typename T>
Tensor<T> MixFFN<T>::forward(const Tensor<T>& tokens, std::int64_t h, std::int64_t w) {
  NameScope scope(this->local_name());
  auto x = fc1_->forward(tokens);
  x = tokens_from_map(dw_->forward(map_from_tokens(x, h, w)));
  return fc2_->forward(gelu(x));
}

template <typename T>
TransformerBlock<T>::TransformerBlock(std::int64_t dim, std::int64_t heads, std::int64_t sr_ratio,
                                      std::int64_t mlp_ratio, double eps, Rng& rng) {
  norm1_ = this->register_module("norm1", std::make_shared<LayerNorm<T>>(dim, eps));
  attn_ = this->register_module("attn", std::make_shared<EfficientSelfAttention<T>>(dim, heads, sr_ratio, eps, rng));
  norm2_ = this->register_module("norm2", std::make_shared<LayerNorm<T>>(dim, eps));
  ffn_ = this->register_module("ffn", std::make_shared<MixFFN<T>>(dim, dim * mlp_ratio, rng));
}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& tokens, std::int64_t h, std::int64_t w) {
  NameScope scope(this->local_name());
  auto x = add(tokens, attn_->forward(norm1_->forward(tokens), h, w));
  return add(x, ffn_->forward(norm2_->forward(x), h, w));
}

template <typename T>
MiTEncoder<T>::MiTEncoder(const MiTConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  std::int64_t in = cfg_.in_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string prefix = "stage" + std::to_string(i + 1);
    auto& st = stages_[i];
    const auto dim = cfg_.embed_dims[i];
    st.embed = this->register_module(
        prefix + ".patch_embed",
        std::make_shared<OverlapPatchEmbed<T>>(in, dim, cfg_.patch_kernels[i], cfg_.patch_strides[i],
                                               cfg_.patch_paddings[i], cfg_.layer_norm_eps, rng));
    for (std::int64_t b = 0; b < cfg_.depths[i]; ++b) {
      st.blocks.push_back(this->register_module(
          prefix + ".block" + std::to_string(b),
          std::make_shared<TransformerBlock<T>>(dim, cfg_.num_heads[i], cfg_.sr_ratios[i],
                                                cfg_.mlp_ratios[i], cfg_.layer_norm_eps, rng)));
    }
    st.norm = this->register_module(prefix + ".norm", std::make_shared<LayerNorm<T>>(dim, cfg_.layer_norm_eps));
    in = dim;
  }
}

template <typename T>
EncoderOutput<T> MiTEncoder<T>::forward(const Tensor<T>& image) {
  NameScope scope(this->local_name());
  if (image.rank() != 4 || image.dim(1) != cfg_.in_channels) {
    throw ConfigError("encoder: expected (N, " + std::to_string(cfg_.in_channels) +
                      ", H, W) input, got " + shape_string(image.shape()));
  }
  require_input_extent(image.dim(2), image.dim(3), cfg_.total_stride());
  EncoderOutput<T> out;
  Tensor<T> x = image;
  for (int i = 0; i < 4; ++i) {
    auto& st = stages_[i];
    auto tm = st.embed->forward(x);
    auto tokens = tm.tokens;
    for (auto& blk : st.blocks) tokens = blk->forward(tokens, tm.height, tm.width);
    tokens = st.norm->forward(tokens);
    x = map_from_tokens(tokens, tm.height, tm.width);
    out.features[i] = x;
  }
  return out;
}

template <typename T>
void save_backbone_weights(const MiTEncoder<T>& encoder, const std::filesystem::path& path) {
  Archive ar;
  ar.put_text("meta/backbone", encoder.config().to_ini());
  export_state(encoder, ar);
  ar.save(path);
}

template <typename T>
void load_backbone_weights(MiTEncoder<T>& encoder, const std::filesystem::path& path) {
  const Archive ar = Archive::load(path);
  import_state(encoder, ar, "");
}

#define DSNET_INSTANTIATE(T)                                                           \
  template class OverlapPatchEmbed<T>;                                                 \
  template class EfficientSelfAttention<T>;                                            \
  template class MixFFN<T>;                                                            \
  template class TransformerBlock<T>;                                                  \
  template class MiTEncoder<T>;                                                        \
  template void save_backbone_weights<T>(const MiTEncoder<T>&, const std::filesystem::path&); \
  template void load_backbone_weights<T>(MiTEncoder<T>&, const std::filesystem::path&);

DSNET_INSTANTIATE(float)
DSNET_INSTANTIATE(double)
#undef DSNET_INSTANTIATE

}  // namespace dsnet
