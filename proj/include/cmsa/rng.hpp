#pragma once

#include <cstdint>
#include <random>

#include "cmsa/tensor.hpp"

namespace cmsa {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a tag (splitmix64 mix).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <class T>
Tensor<T> uniform_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = T(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <class T>
Tensor<T> normal_tensor(Shape shape, double mean, double stddev, Rng& rng, bool requires_grad = false) {
  std::normal_distribution<double> dist(mean, stddev);
  std::vector<T> data(numel(shape));
  for (auto& v : data) v = T(dist(rng));
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

}  // namespace cmsa
