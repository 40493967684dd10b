#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cmsa/tensor.hpp"

namespace cmsa {

/// Ordered, named collection of trainable tensors.
template <class T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  const Tensor<T>& add(std::string name, Tensor<T> value) {
    if (contains(name)) throw UsageError("duplicate parameter name '" + name + "'");
    value.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.emplace_back(std::move(name), std::move(value));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + name + "'");
    return entries_[it->second].second;
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(std::as_const(*this).get(name));
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Moment buffers and step counter of the Adam optimizer, keyed by parameter name.
template <class T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, std::vector<T>> first_moment;
  std::map<std::string, std::vector<T>> second_moment;
};

/// One bias-corrected Adam update. Weight decay enters as an L2 term added
/// to the gradient. Gradients are zeroed afterwards.
template <class T>
void adam_step(std::vector<std::pair<std::string, Tensor<T>>>& params, AdamState<T>& state, double lr,
               double weight_decay) {
  for (auto& [name, p] : params)
    if (!p.has_grad()) throw UsageError("adam_step: parameter '" + name + "' has no gradient");
  state.step += 1;
  const double t = double(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const T b1 = T(state.beta1), b2 = T(state.beta2);
  for (auto& [name, p] : params) {
    auto& m = state.first_moment[name];
    auto& v = state.second_moment[name];
    if (m.empty()) {
      m.assign(p.numel(), T(0));
      v.assign(p.numel(), T(0));
    }
    if (m.size() != p.numel()) throw DimensionError("adam_step: moment buffer size mismatch for '" + name + "'");
    auto theta = p.mutable_data();
    auto grad = p.mutable_grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const T g = grad[i] + T(weight_decay) * theta[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const double mhat = double(m[i]) / c1;
      const double vhat = double(v[i]) / c2;
      theta[i] -= T(lr * mhat / (std::sqrt(vhat) + state.eps));
    }
    p.zero_grad();
  }
}

template <class T>
void adam_step(ParamStore<T>& store, AdamState<T>& state, double lr, double weight_decay) {
  adam_step(store.entries(), state, lr, weight_decay);
}

/// Polynomial decay base_lr * (1 - iter/max_iter)^power; 0 once iter >= max_iter.
inline double poly_lr(double base_lr, std::uint64_t iter, std::uint64_t max_iter, double power = 0.9) {
  if (!(power > 0)) throw UsageError("poly_lr: power must be positive");
  if (iter >= max_iter) return 0.0;
  return base_lr * std::pow(1.0 - double(iter) / double(max_iter), power);
}

}  // namespace cmsa
