#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dsnet/ops.hpp"
#include "dsnet/random.hpp"
#include "dsnet/serialize.hpp"
#include "dsnet/tensor.hpp"

namespace dsnet {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // false for parameters excluded from weight decay
};

/// Owner of named parameters, buffers and child modules.
template <typename T>
class Module {
 public:
  virtual ~Module() = default;

  void train(bool on = true);
  void eval() { train(false); }
  bool is_training() const { return training_; }
  const std::string& local_name() const { return name_; }

  /// Fully qualified dotted names, depth-first in registration order.
  std::vector<NamedTensor<T>> named_parameters() const;
  std::vector<NamedTensor<T>> named_buffers() const;
  std::int64_t parameter_count() const;
  void zero_grad();

 protected:
  Tensor<T> register_parameter(std::string name, Tensor<T> t, bool decay = true);
  Tensor<T> register_buffer(std::string name, Tensor<T> t);
  template <class M>
  std::shared_ptr<M> register_module(std::string name, std::shared_ptr<M> m) {
    static_cast<Module<T>&>(*m).name_ = name;
    children_.emplace_back(std::move(name), m);
    return m;
  }

 private:
  void collect(const std::string& prefix, bool buffers, std::vector<NamedTensor<T>>& out) const;

  std::string name_;
  bool training_ = true;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
};

/// Adds every parameter ("param/<name>") and buffer ("buffer/<name>") to `ar`.
template <typename T>
void export_state(const Module<T>& m, Archive& ar);

/// Copies matching entries of `ar` into `m`. Every parameter and buffer whose
/// name starts with `prefix` must be present with the right shape; otherwise
/// nothing is assigned and a ConfigError lists every mismatch. Unknown
/// entries under the prefix are mismatches too.
template <typename T>
void import_state(Module<T>& m, const Archive& ar, const std::string& prefix = "");

// ---------------------------------------------------------------------------
// Layers

template <typename T>
class Conv2d : public Module<T> {
 public:
  struct Options {
    std::int64_t kernel = 3;
    std::int64_t stride = 1;
    std::int64_t padding = 1;
    std::int64_t groups = 1;
    bool bias = true;
  };
  /// Weights are drawn from N(0, 2 / fan_out), bias zero.
  Conv2d(std::int64_t in, std::int64_t out, Options opts, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  ConvParams<T>& params() { return p_; }
  const ConvParams<T>& params() const { return p_; }

 private:
  ConvParams<T> p_;
};

template <typename T>
class BatchNorm2d : public Module<T> {
 public:
  explicit BatchNorm2d(std::int64_t channels, BatchNormOptions opts = {});
  Tensor<T> forward(const Tensor<T>& x);

  Tensor<T>& gamma() { return gamma_; }
  Tensor<T>& beta() { return beta_; }
  BatchNormState<T>& state() { return state_; }

 private:
  Tensor<T> gamma_, beta_;
  BatchNormState<T> state_;
  BatchNormOptions opts_;
};

/// Convolution followed by batch norm and ReLU.
template <typename T>
class ConvBR : public Module<T> {
 public:
  ConvBR(std::int64_t in, std::int64_t out, std::int64_t kernel, Rng& rng);
  Tensor<T> forward(const Tensor<T>& x);

  Conv2d<T>& conv() { return *conv_; }
  BatchNorm2d<T>& bn() { return *bn_; }

 private:
  std::shared_ptr<Conv2d<T>> conv_;
  std::shared_ptr<BatchNorm2d<T>> bn_;
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(std::int64_t dim, double eps = 1e-6);
  Tensor<T> forward(const Tensor<T>& x) const;

 private:
  Tensor<T> gamma_, beta_;
  double eps_;
};

template <typename T>
class Linear : public Module<T> {
 public:
  /// Weights ~ truncated N(0, 0.02^2), bias zero.
  Linear(std::int64_t in, std::int64_t out, Rng& rng, bool bias = true);
  Tensor<T> forward(const Tensor<T>& x) const;

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_;
};

}  // namespace dsnet
