#include "dsnet/module.hpp"

#include <cmath>
#include <cstring>
#include <set>
#include <sstream>

#include "dsnet/error.hpp"

namespace dsnet {

template <typename T>
void Module<T>::train(bool on) {
  training_ = on;
  for (auto& [name, child] : children_) child->train(on);
}

template <typename T>
void Module<T>::collect(const std::string& prefix, bool buffers,
                        std::vector<NamedTensor<T>>& out) const {
  for (const auto& nt : buffers ? buffers_ : params_) {
    out.push_back({prefix + nt.name, nt.tensor, nt.decay});
  }
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", buffers, out);
}

template <typename T>
std::vector<NamedTensor<T>> Module<T>::named_parameters() const {
  std::vector<NamedTensor<T>> out;
  collect("", false, out);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Module<T>::named_buffers() const {
  std::vector<NamedTensor<T>> out;
  collect("", true, out);
  return out;
}

template <typename T>
std::int64_t Module<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
void Module<T>::zero_grad() {
  for (auto& p : named_parameters()) p.tensor.zero_grad();
}

template <typename T>
Tensor<T> Module<T>::register_parameter(std::string name, Tensor<T> t, bool decay) {
  t.set_requires_grad(true);
  params_.push_back({std::move(name), t, decay});
  return t;
}

template <typename T>
Tensor<T> Module<T>::register_buffer(std::string name, Tensor<T> t) {
  buffers_.push_back({std::move(name), t, false});
  return t;
}

template <typename T>
void export_state(const Module<T>& m, Archive& ar) {
  for (const auto& p : m.named_parameters()) ar.put("param/" + p.name, p.tensor);
  for (const auto& b : m.named_buffers()) ar.put("buffer/" + b.name, b.tensor);
}

template <typename T>
void import_state(Module<T>& m, const Archive& ar, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor<T>>> targets;
  for (const auto& p : m.named_parameters())
    if (p.name.rfind(prefix, 0) == 0) targets.emplace_back("param/" + p.name, p.tensor);
  for (const auto& b : m.named_buffers())
    if (b.name.rfind(prefix, 0) == 0) targets.emplace_back("buffer/" + b.name, b.tensor);

  std::vector<std::string> problems;
  std::set<std::string> expected;
  for (const auto& [key, t] : targets) {
    expected.insert(key);
    if (!ar.contains(key) || ar.is_text(key)) {
      problems.push_back("missing " + key);
      continue;
    }
    const auto& st = ar.tensor(key);
    if (st.shape != t.shape()) {
      problems.push_back("shape mismatch " + key + ": file " + shape_string(st.shape) +
                         " vs model " + shape_string(t.shape()));
    }
  }
  for (const auto& name : ar.names()) {
    for (const char* kind : {"param/", "buffer/"}) {
      const std::string head = std::string(kind) + prefix;
      if (name.rfind(head, 0) == 0 && !expected.count(name)) problems.push_back("unexpected " + name);
    }
  }
  if (!problems.empty()) {
    std::ostringstream os;
    os << "weight import failed with " << problems.size() << " mismatch(es):";
    for (const auto& p : problems) os << "\n  " << p;
    throw ConfigError(os.str());
  }
  for (auto& [key, t] : targets) {
    const auto loaded = ar.tensor(key).template to_tensor<T>();
    std::memcpy(t.mutable_data(), loaded.data(), static_cast<std::size_t>(t.numel()) * sizeof(T));
  }
}

// ---------------------------------------------------------------------------

template <typename T>
Conv2d<T>::Conv2d(std::int64_t in, std::int64_t out, Options opts, Rng& rng) {
  p_.in_channels = in;
  p_.out_channels = out;
  p_.kernel_h = p_.kernel_w = opts.kernel;
  p_.stride = opts.stride;
  p_.padding = opts.padding;
  p_.groups = opts.groups;
  if (opts.groups <= 0 || in % opts.groups != 0 || out % opts.groups != 0) {
    throw ConfigError("Conv2d: channels (" + std::to_string(in) + ", " + std::to_string(out) +
                      ") not divisible by groups " + std::to_string(opts.groups));
  }
  Tensor<T> w(Shape{out, in / opts.groups, opts.kernel, opts.kernel});
  const double fan_out = static_cast<double>(opts.kernel * opts.kernel * out / opts.groups);
  const double stddev = std::sqrt(2.0 / fan_out);
  for (auto& v : w.mutable_values()) v = static_cast<T>(rng.normal(0.0, stddev));
  p_.weight = this->register_parameter("weight", w);
  if (opts.bias) p_.bias = this->register_parameter("bias", Tensor<T>::zeros({out}));
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x) const {
  NameScope scope(this->local_name());
  return conv2d(x, p_);
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::int64_t channels, BatchNormOptions opts) : opts_(opts) {
  gamma_ = this->register_parameter("weight", Tensor<T>::ones({channels}), false);
  beta_ = this->register_parameter("bias", Tensor<T>::zeros({channels}), false);
  state_ = BatchNormState<T>::create(channels);
  this->register_buffer("running_mean", state_.running_mean);
  this->register_buffer("running_var", state_.running_var);
  this->register_buffer("num_batches_tracked", state_.batches_tracked);
}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x) {
  NameScope scope(this->local_name());
  return batch_norm2d(x, gamma_, beta_, state_, this->is_training(), opts_);
}

template <typename T>
ConvBR<T>::ConvBR(std::int64_t in, std::int64_t out, std::int64_t kernel, Rng& rng) {
  typename Conv2d<T>::Options o;
  o.kernel = kernel;
  o.padding = kernel / 2;
  conv_ = this->register_module("conv", std::make_shared<Conv2d<T>>(in, out, o, rng));
  bn_ = this->register_module("bn", std::make_shared<BatchNorm2d<T>>(out));
}

template <typename T>
Tensor<T> ConvBR<T>::forward(const Tensor<T>& x) {
  NameScope scope(this->local_name());
  return relu(bn_->forward(conv_->forward(x)));
}

template <typename T>
LayerNorm<T>::LayerNorm(std::int64_t dim, double eps) : eps_(eps) {
  gamma_ = this->register_parameter("weight", Tensor<T>::ones({dim}), false);
  beta_ = this->register_parameter("bias", Tensor<T>::zeros({dim}), false);
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x) const {
  NameScope scope(this->local_name());
  return layer_norm(x, gamma_, beta_, eps_);
}

template <typename T>
Linear<T>::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool bias) {
  Tensor<T> w(Shape{out, in});
  for (auto& v : w.mutable_values()) v = static_cast<T>(rng.truncated_normal(0.0, 0.02));
  weight_ = this->register_parameter("weight", w);
  if (bias) bias_ = this->register_parameter("bias", Tensor<T>::zeros({out}));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  NameScope scope(this->local_name());
  return linear(x, weight_, bias_);
}

#define DSNET_INSTANTIATE(T)                                                        \
  template class Module<T>;                                                         \
  template void export_state<T>(const Module<T>&, Archive&);                        \
  template void import_state<T>(Module<T>&, const Archive&, const std::string&);    \
  template class Conv2d<T>;                                                         \
  template class BatchNorm2d<T>;                                                    \
  template class ConvBR<T>;                                                         \
  template class LayerNorm<T>;                                                      \
  template class Linear<T>;

DSNET_INSTANTIATE(float)
DSNET_INSTANTIATE(double)
#undef DSNET_INSTANTIATE

}  // namespace dsnet
