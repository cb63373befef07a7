#include "dsnet/tensor.hpp"

#include <numeric>
#include <sstream>

#include "dsnet/error.hpp"

namespace dsnet {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw ConfigError("negative extent in shape " + shape_string(shape));
    n *= e;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : s_(std::make_shared<detail::TensorStorage<T>>()) {
  const auto n = shape_numel(shape);
  s_->shape = std::move(shape);
  s_->values.assign(static_cast<std::size_t>(n), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : s_(std::make_shared<detail::TensorStorage<T>>()) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ConfigError("tensor shape " + shape_string(shape) + " does not match " +
                      std::to_string(values.size()) + " values");
  }
  s_->shape = std::move(shape);
  s_->values = std::move(values);
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ConfigError("axis " + std::to_string(axis) + " out of range for shape " +
                      shape_string(shape()));
  }
  return s_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_string(shape()));
  return s_->values[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::int64_t> index) const {
  if (index.size() != rank()) throw ConfigError("index rank mismatch for " + shape_string(shape()));
  std::int64_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    const auto extent = s_->shape[axis++];
    if (i < 0 || i >= extent) throw ConfigError("index out of range for " + shape_string(shape()));
    flat = flat * extent + i;
  }
  return s_->values[static_cast<std::size_t>(flat)];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  s_->requires_grad = on;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() {
  if (s_->grad.empty()) s_->grad.assign(s_->values.size(), T{0});
  return s_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(s_->shape, s_->values);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped_copy(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ConfigError("cannot reshape " + shape_string(this->shape()) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), s_->values);
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw ConfigError("backward already ran on this tape; call reset() first");
  if (!loss.defined() || loss.numel() != 1) {
    throw ConfigError("backward requires a scalar loss, got shape " +
                      (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ConfigError("loss was not produced on the active tape");
  Tensor<T> seed = loss;
  seed.grad_buffer()[0] += T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->backward || !it->output.has_grad()) continue;
    it->backward(it->output.grad());
  }
  consumed_ = true;
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  consumed_ = false;
}

template <typename T>
std::uint64_t Tape<T>::total_macs() const {
  std::uint64_t total = 0;
  for (const auto& n : nodes_) total += n.macs;
  return total;
}

namespace {
template <typename T>
Tape<T>*& tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

std::vector<std::string>& scope_stack() {
  thread_local std::vector<std::string> stack;
  return stack;
}
}  // namespace

template <typename T>
Tape<T>* active_tape() {
  return tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  tape_slot<T>() = previous_;
}

NameScope::NameScope(std::string_view name) {
  auto& stack = scope_stack();
  if (stack.empty() || stack.back().empty()) {
    stack.emplace_back(name);
  } else if (name.empty()) {
    stack.push_back(stack.back());
  } else {
    stack.push_back(stack.back() + "." + std::string(name));
  }
}

NameScope::~NameScope() { scope_stack().pop_back(); }

std::string NameScope::current() {
  const auto& stack = scope_stack();
  return stack.empty() ? std::string() : stack.back();
}

template <typename T>
Tensor<T> record_op(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T> output,
                    std::uint64_t macs, std::function<void(std::span<const T>)> backward) {
  Tape<T>* tape = tape_slot<T>();
  if (!tape) return output;
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  TapeNode<T> node;
  node.op = std::string(op);
  node.scope = NameScope::current();
  node.macs = macs;
  if (needs_grad) {
    output.set_requires_grad(true);
    node.backward = std::move(backward);
  }
  node.inputs = std::move(inputs);
  node.output = output;
  tape->record(std::move(node));
  return output;
}

template <typename T>
void accumulate_grad(Tensor<T> dst, std::span<const T> src) {
  if (!dst.requires_grad()) return;
  auto g = dst.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

#define DSNET_INSTANTIATE(T)                                                                  \
  template class Tensor<T>;                                                                   \
  template class Tape<T>;                                                                     \
  template class TapeScope<T>;                                                                \
  template Tape<T>* active_tape<T>();                                                         \
  template Tensor<T> record_op<T>(std::string_view, std::vector<Tensor<T>>, Tensor<T>,        \
                                  std::uint64_t, std::function<void(std::span<const T>)>);    \
  template void accumulate_grad<T>(Tensor<T>, std::span<const T>);

DSNET_INSTANTIATE(float)
DSNET_INSTANTIATE(double)
#undef DSNET_INSTANTIATE

}  // namespace dsnet
