#pragma once

#if defined(__SSE2__)
#include <xmmintrin.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cmsa/error.hpp"

namespace cmsa {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Row-major strides of a shape.
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

enum class DType : std::uint8_t { float32 = 1, float64 = 2, uint64 = 3 };

template <class T>
inline constexpr DType dtype_of = std::is_same_v<T, float> ? DType::float32 : DType::float64;

// Global switches. Graph recording is per thread so that independent
// evaluation passes can run while another thread trains.
namespace detail {
inline thread_local bool grad_enabled = true;
inline bool check_finite = false;
}  // namespace detail

/// Enables NaN/Inf detection on every op output (debug mode).
inline void set_check_finite(bool on) { detail::check_finite = on; }
inline bool check_finite_enabled() { return detail::check_finite; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

/// Flushes subnormal floats to zero (FTZ and DAZ) on the current thread for
/// its lifetime. Training and inference run under it so that results do not
/// depend on the caller's floating-point mode. No-op without SSE.
class FlushDenormalsGuard {
 public:
  FlushDenormalsGuard() {
#if defined(__SSE2__)
    previous_ = _mm_getcsr();
    _mm_setcsr(previous_ | 0x8040u);
#endif
  }
  ~FlushDenormalsGuard() {
#if defined(__SSE2__)
    _mm_setcsr(previous_);
#endif
  }
  FlushDenormalsGuard(const FlushDenormalsGuard&) = delete;
  FlushDenormalsGuard& operator=(const FlushDenormalsGuard&) = delete;

 private:
  unsigned previous_ = 0;
};

namespace detail {

template <class T>
struct Impl;

// One recorded operation: the inputs it read and a closure that pushes the
// output gradient into them.
template <class T>
struct GradFn {
  const char* name = "";
  std::vector<std::shared_ptr<Impl<T>>> inputs;
  std::function<void(const Impl<T>& out)> backward;
};

template <class T>
struct Impl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<GradFn<T>> grad_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with optional gradient tracking.
///
/// A Tensor is a shared handle. Its values never change after construction
/// except through `mutable_data()` on leaves (optimizer updates); the
/// gradient buffer is accumulated by `backward`.
template <class T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);

 public:
  using value_type = T;
  using ImplPtr = std::shared_ptr<detail::Impl<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::Impl<T>>()) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    if (cmsa::numel(shape) != data.size())
      throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " +
                           to_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = cmsa::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = cmsa::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  static constexpr DType dtype() { return dtype_of<T>; }

  std::span<const T> data() const { return impl_->data; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  /// Value of a one-element tensor.
  T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  T at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("index rank mismatch");
    auto st = strides_of(shape());
    std::size_t off = 0, i = 0;
    for (auto v : index) {
      if (v >= shape()[i]) throw DimensionError("index out of range");
      off += v * st[i++];
    }
    return impl_->data[off];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return !impl_->grad_fn; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }
  void clear_grad() { impl_->grad.clear(); }

  /// In-place access for optimizers and initializers. Leaves only.
  std::span<T> mutable_data() {
    if (!is_leaf()) throw UsageError("mutable_data() on a non-leaf tensor");
    return impl_->data;
  }

  void set_requires_grad(bool on) {
    if (!is_leaf()) throw UsageError("set_requires_grad() on a non-leaf tensor");
    impl_->requires_grad = on;
  }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

  /// Deep copy including the requires_grad flag (no graph, no grad).
  Tensor clone() const { return Tensor(shape(), impl_->data, requires_grad()); }

  const ImplPtr& impl() const { return impl_; }
  bool same_as(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  ImplPtr impl_;
};

namespace detail {

template <class T>
void check_values(const Impl<T>& out, const char* op) {
  if (!check_finite) return;
  for (T v : out.data)
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

/// Wraps freshly computed output values, recording a graph node when any
/// input tracks gradients and recording is enabled.
template <class T, class Backward>
Tensor<T> make_result(const char* name, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  check_values(*out.impl(), name);
  if (!grad_enabled) return out;
  bool any = false;
  for (auto* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto fn = std::make_shared<GradFn<T>>();
  fn->name = name;
  for (auto* in : inputs) fn->inputs.push_back(in->impl());
  fn->backward = std::forward<Backward>(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(fn);
  return out;
}

/// Same as above for a runtime-sized input list.
template <class T, class Backward>
Tensor<T> make_result_n(const char* name, Shape shape, std::vector<T> data,
                        const std::vector<Tensor<T>>& inputs, Backward&& backward) {
  Tensor<T> out(std::move(shape), std::move(data));
  check_values(*out.impl(), name);
  if (!grad_enabled) return out;
  bool any = false;
  for (auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto fn = std::make_shared<GradFn<T>>();
  fn->name = name;
  for (auto& in : inputs) fn->inputs.push_back(in.impl());
  fn->backward = std::forward<Backward>(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(fn);
  return out;
}

}  // namespace detail

/// Topologically ordered view of the operations reachable from a root tensor.
template <class T>
class ComputeGraph {
 public:
  using ImplPtr = typename Tensor<T>::ImplPtr;

  /// Collects every gradient-tracking tensor the root depends on; nodes are
  /// ordered so that each tensor appears after all of its inputs.
  static ComputeGraph build(const Tensor<T>& root) {
    ComputeGraph g;
    if (!root.requires_grad()) return g;
    std::unordered_set<const detail::Impl<T>*> seen;
    // Iterative post-order DFS; deep graphs must not overflow the stack.
    std::vector<std::pair<ImplPtr, std::size_t>> stack;
    stack.emplace_back(root.impl(), 0);
    seen.insert(root.impl().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      const auto& fn = node->grad_fn;
      if (fn && next < fn->inputs.size()) {
        const auto& in = fn->inputs[next++];
        if (in->requires_grad && seen.insert(in.get()).second) stack.emplace_back(in, 0);
        continue;
      }
      g.order_.push_back(node);
      stack.pop_back();
    }
    return g;
  }

  std::size_t size() const { return order_.size(); }
  const std::vector<ImplPtr>& nodes() const { return order_; }

  /// Reverse-mode sweep. The root's gradient is seeded with ones; interior
  /// gradients are released once consumed, leaf gradients accumulate.
  void backward() {
    if (order_.empty()) return;
    auto& root = *order_.back();
    auto& seed = root.ensure_grad();
    if (root.grad_fn)
      std::fill(seed.begin(), seed.end(), T(1));
    else
      for (auto& g : seed) g += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      auto& node = **it;
      if (!node.grad_fn) continue;
      if (!node.grad.empty()) node.grad_fn->backward(node);
      node.grad.clear();
      node.grad.shrink_to_fit();
    }
  }

 private:
  std::vector<ImplPtr> order_;
};

/// Computes d(loss)/d(x) for every gradient-tracking leaf x reachable from loss.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw UsageError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) throw UsageError("backward() on a tensor that is not part of a graph");
  ComputeGraph<T>::build(loss).backward();
}

}  // namespace cmsa
