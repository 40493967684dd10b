#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cmsa/ops.hpp"
#include "cmsa/optim.hpp"
#include "cmsa/rng.hpp"

namespace cmsa {

/// Weights of the gated three-level fusion and the mask predictor.
template <class T>
struct FusionParams {
  std::array<Tensor<T>, 3> proj;                   // [d_f x D_i], 1x1 conv kernels
  std::array<Tensor<T>, 3> memory_w, memory_b;     // [1 x d_f], [1 x 1]
  std::array<Tensor<T>, 3> reset_w, reset_b;       // [1 x d_f], [1 x 1]
  Tensor<T> gamma;                                 // [3]
  Tensor<T> pred_w;                                // [1 x d_f x 3 x 3]
  Tensor<T> pred_b;                                // [1 x 1 x 1]

  std::size_t fused_dim() const { return proj[0].dim(0); }
};

template <class T>
FusionParams<T> make_fusion_params(ParamStore<T>& store, const std::array<std::size_t, 3>& level_dims,
                                   std::size_t fused_dim, Rng& rng) {
  if (fused_dim == 0) throw ConfigError("fusion dim must be positive");
  FusionParams<T> p;
  const double gate_bound = std::sqrt(3.0 / double(fused_dim));
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string lv = std::to_string(i + 1);
    const double b = std::sqrt(3.0 / double(level_dims[i]));
    p.proj[i] = store.add("fusion.proj" + lv, uniform_tensor<T>({fused_dim, level_dims[i]}, -b, b, rng));
    p.memory_w[i] = store.add("fusion.memory" + lv + ".weight", uniform_tensor<T>({1, fused_dim}, -gate_bound, gate_bound, rng));
    p.memory_b[i] = store.add("fusion.memory" + lv + ".bias", Tensor<T>::zeros({1, 1}));
    p.reset_w[i] = store.add("fusion.reset" + lv + ".weight", uniform_tensor<T>({1, fused_dim}, -gate_bound, gate_bound, rng));
    p.reset_b[i] = store.add("fusion.reset" + lv + ".bias", Tensor<T>::zeros({1, 1}));
  }
  p.gamma = store.add("fusion.gamma", Tensor<T>::full({3}, T(1)));
  const double pb = std::sqrt(3.0 / double(fused_dim * 9));
  p.pred_w = store.add("fusion.pred.weight", uniform_tensor<T>({1, fused_dim, 3, 3}, -pb, pb, rng));
  p.pred_b = store.add("fusion.pred.bias", Tensor<T>::zeros({1, 1, 1}));
  return p;
}

/// 1x1 convolution of a pooled map [H x W x D] to X [d_f x H x W].
template <class T>
Tensor<T> project_level(const Tensor<T>& pooled, const Tensor<T>& kernel) {
  if (pooled.rank() != 3 || kernel.rank() != 2 || kernel.dim(1) != pooled.dim(2))
    throw DimensionError("project_level: kernel " + to_string(kernel.shape()) + " does not fit map " +
                         to_string(pooled.shape()));
  const std::size_t h = pooled.dim(0), w = pooled.dim(1);
  auto x = matmul(kernel, reshape(pooled, {h * w, pooled.dim(2)}), false, true);  // [d_f x P]
  return reshape(x, {kernel.dim(0), h, w});
}

template <class T>
struct Gates {
  Tensor<T> memory, reset;  // [1 x H x W]
};

/// sigmoid(w . x_p + b) per position, for the memory and reset gates.
template <class T>
Gates<T> compute_gates(const Tensor<T>& x, const Tensor<T>& memory_w, const Tensor<T>& memory_b,
                       const Tensor<T>& reset_w, const Tensor<T>& reset_b) {
  if (x.rank() != 3) throw DimensionError("compute_gates: X must be [d_f x H x W]");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto flat = reshape(x, {c, h * w});
  auto gate = [&](const Tensor<T>& wt, const Tensor<T>& b) {
    return reshape(sigmoid(add(matmul(wt, flat), b)), {1, h, w});
  };
  return {gate(memory_w, memory_b), gate(reset_w, reset_b)};
}

/// G^i = (1 - m^i) X^i + sum_{j != i} gamma_j m^j X^j
/// F_o^i = r^i tanh(G^i) + (1 - r^i) X^i
/// Gates are [1 x H x W] and broadcast over channels.
template <class T>
std::array<Tensor<T>, 3> gated_fuse(const std::array<Tensor<T>, 3>& x, const std::array<Gates<T>, 3>& gates,
                                    const Tensor<T>& gamma) {
  if (gamma.numel() != 3) throw DimensionError("gated_fuse: gamma must hold three values");
  for (const auto& xi : x)
    if (xi.shape() != x[0].shape()) throw DimensionError("gated_fuse: level maps differ in shape");
  std::array<Tensor<T>, 3> gated_in;
  for (std::size_t j = 0; j < 3; ++j)
    gated_in[j] = mul(mul(gates[j].memory, x[j]), reshape(slice(gamma, 0, j, 1), {1, 1, 1}));
  std::array<Tensor<T>, 3> out;
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor<T> g = mul(one_minus(gates[i].memory), x[i]);
    for (std::size_t j = 0; j < 3; ++j)
      if (j != i) g = add(g, gated_in[j]);
    out[i] = add(mul(gates[i].reset, tanh(g)), mul(one_minus(gates[i].reset), x[i]));
  }
  return out;
}

template <class T>
struct MaskPrediction {
  Tensor<T> fused;        // sum of the three fused maps, [d_f x H x W]
  Tensor<T> probability;  // [H_img x W_img] in (0, 1)
};

/// P = sigmoid(upsample(conv3x3(sum_i F_o^i))).
template <class T>
MaskPrediction<T> predict_mask(const std::array<Tensor<T>, 3>& fused, const Tensor<T>& pred_w, const Tensor<T>& pred_b,
                               std::size_t out_h, std::size_t out_w) {
  auto total = add(add(fused[0], fused[1]), fused[2]);
  auto logits = add(conv2d(total, pred_w, ConvOptions{1, 1, true}), pred_b);
  auto up = upsample_bilinear(logits, out_h, out_w);
  return {total, reshape(sigmoid(up), {out_h, out_w})};
}

/// Row-major binary mask with values in {0, 1}.
struct BinaryMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : pixels) n += v;
    return n;
  }
};

/// pixel >= threshold -> 1, else 0.
template <class T>
BinaryMask binarize(const Tensor<T>& prob, double threshold = 0.5) {
  if (!(threshold > 0 && threshold < 1)) throw UsageError("binarize: threshold must lie in (0, 1)");
  if (prob.rank() != 2) throw DimensionError("binarize: expected an [H x W] map");
  BinaryMask m{prob.dim(0), prob.dim(1), {}};
  m.pixels.reserve(prob.numel());
  for (auto v : prob.data()) m.pixels.push_back(double(v) >= threshold ? 1 : 0);
  return m;
}

}  // namespace cmsa
