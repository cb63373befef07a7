#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dsnet {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major tensor with shared storage. Images use NCHW.
///
/// Copies of a Tensor alias the same storage. Values are treated as immutable
/// once the tensor participates in a recorded graph; only gradient buffers are
/// accumulated into during backward.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  /// Extent of axis `axis`; negative values count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(s_->values.size()); }

  std::span<const T> values() const { return s_->values; }
  std::span<T> mutable_values() { return s_->values; }
  const T* data() const { return s_->values.data(); }
  T* mutable_data() { return s_->values.data(); }
  T item() const;
  T at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return s_ && !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  /// Gradient buffer, allocated as zeros on first use.
  std::span<T> grad_buffer();
  void zero_grad() { s_->grad.clear(); }

  /// Deep copy of values; the result does not require grad.
  Tensor clone() const;
  /// View-free reshape: shares nothing, copies values. Not differentiable.
  Tensor reshaped_copy(Shape shape) const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const void* id() const { return s_.get(); }

 private:
  std::shared_ptr<detail::TensorStorage<T>> s_;
};

/// One recorded operation. `backward` is empty when no input requires grad.
template <typename T>
struct TapeNode {
  std::string op;
  std::string scope;
  std::vector<Tensor<T>> inputs;
  Tensor<T> output;
  std::function<void(std::span<const T> grad_out)> backward;
  std::uint64_t macs = 0;
};

/// Ordered record of operations executed while the tape is active.
///
/// backward() may be called once per recording; a second call throws until
/// reset(). Leaf gradients accumulate across recordings until zero_grad().
template <typename T>
class Tape {
 public:
  void record(TapeNode<T> node) { nodes_.push_back(std::move(node)); }
  const std::vector<TapeNode<T>>& nodes() const { return nodes_; }
  void backward(const Tensor<T>& loss);
  void reset();
  bool consumed() const { return consumed_; }
  std::uint64_t total_macs() const;

 private:
  std::vector<TapeNode<T>> nodes_;
  bool consumed_ = false;
};

template <typename T>
Tape<T>* active_tape();

/// Activates `tape` for ops of scalar type T on the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Dotted name prefix attached to nodes recorded on this thread.
class NameScope {
 public:
  explicit NameScope(std::string_view name);
  ~NameScope();
  NameScope(const NameScope&) = delete;
  NameScope& operator=(const NameScope&) = delete;

  static std::string current();
};

/// Records `output` as produced from `inputs`. The output requires grad iff a
/// tape is active and some input requires grad; `backward` is kept only then.
template <typename T>
Tensor<T> record_op(std::string_view op, std::vector<Tensor<T>> inputs,
                    Tensor<T> output, std::uint64_t macs,
                    std::function<void(std::span<const T>)> backward);

/// Adds `src` into `dst`'s gradient buffer when `dst` requires grad.
template <typename T>
void accumulate_grad(Tensor<T> dst, std::span<const T> src);

}  // namespace dsnet
