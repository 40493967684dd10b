#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cmsa/attention.hpp"

namespace cmsa {

/// Frame indices of the clip centred on `target`: target-tau .. target+tau,
/// clamped to the video (edge frames repeat).
inline std::vector<std::size_t> extract_clip(std::size_t video_length, std::size_t target, std::size_t tau) {
  if (video_length == 0) throw InputError("extract_clip: empty video");
  if (target >= video_length) throw InputError("extract_clip: target frame outside the video");
  std::vector<std::size_t> idx;
  idx.reserve(2 * tau + 1);
  for (std::size_t i = 0; i < 2 * tau + 1; ++i) {
    const auto t = std::ptrdiff_t(target) - std::ptrdiff_t(tau) + std::ptrdiff_t(i);
    idx.push_back(std::size_t(std::clamp<std::ptrdiff_t>(t, 0, std::ptrdiff_t(video_length) - 1)));
  }
  return idx;
}

/// Projections of the cross-frame block; values keep the visual width so the
/// pooled result can be added back onto the frame features.
template <class T>
struct CfsaParams {
  Tensor<T> w_q, w_k;  // [d_k x C_v]
  Tensor<T> w_v;       // [C_v x C_v]
};

template <class T>
CfsaParams<T> make_cfsa_params(ParamStore<T>& store, const std::string& prefix, std::size_t channels,
                               std::size_t key_dim, Rng& rng) {
  const double b = std::sqrt(3.0 / double(channels));
  CfsaParams<T> p;
  p.w_q = store.add(prefix + ".w_q", uniform_tensor<T>({key_dim, channels}, -b, b, rng));
  p.w_k = store.add(prefix + ".w_k", uniform_tensor<T>({key_dim, channels}, -b, b, rng));
  p.w_v = store.add(prefix + ".w_v", uniform_tensor<T>({channels, channels}, -b, b, rng));
  return p;
}

/// Stacks per-frame [C x H x W] maps into [(T*P) x C], row = t * P + p.
template <class T>
Tensor<T> stack_frames(const std::vector<Tensor<T>>& frames) {
  if (frames.empty()) throw InputError("cfsa: empty clip");
  std::vector<Tensor<T>> rows;
  for (const auto& f : frames) {
    if (f.shape() != frames[0].shape()) throw DimensionError("cfsa: clip frames differ in shape");
    rows.push_back(transpose(reshape(f, {f.dim(0), f.dim(1) * f.dim(2)})));
  }
  return concat(rows, 0);
}

/// Attention over every (frame, position) pair of the clip:
/// A[(t,p), (t',p')] = softmax over (t',p') of q_{t'p'} . k_{tp};
/// out_{tp} = sum A v_{t'p'}.
template <class T>
AttentionResult<T> cfsa_attention(const std::vector<Tensor<T>>& clip, const CfsaParams<T>& params,
                                  AttentionOptions opt = {}) {
  auto x = stack_frames(clip);
  if (x.dim(1) != params.w_q.dim(1)) throw DimensionError("cfsa_attention: channel count does not match projections");
  return attention(matmul(x, params.w_q, false, true), matmul(x, params.w_k, false, true),
                   matmul(x, params.w_v, false, true), {}, opt);
}

template <class T>
struct FramePooling {
  Tensor<T> pooled;   // [C x H x W]
  Tensor<T> weights;  // [T], sums to 1
};

/// Frame weight w_t = softmax_t(attention received by frame t), pooled
/// feature v_p = sum_t w_t out_{tp}, reshaped to [C x H x W].
template <class T>
FramePooling<T> frame_pool(const Tensor<T>& attended, const Tensor<T>& scores, std::size_t frames, std::size_t h,
                           std::size_t w) {
  const std::size_t positions = h * w;
  if (attended.rank() != 2 || attended.dim(0) != frames * positions || scores.dim(0) != frames * positions)
    throw DimensionError("frame_pool: attended features do not match clip geometry");
  const std::size_t c = attended.dim(1);
  auto received = sum(reshape(sum(scores, {0}), {frames, positions}), {1});  // [T]
  auto weights = softmax(received, 0);
  auto pooled = sum(mul(reshape(attended, {frames, positions, c}), reshape(weights, {frames, 1, 1})), {0});  // [P x C]
  return {reshape(transpose(pooled), {c, h, w}), weights};
}

/// V_T := V_T + V^
template <class T>
Tensor<T> temporal_update(const Tensor<T>& target, const Tensor<T>& pooled) {
  if (target.shape() != pooled.shape()) throw DimensionError("temporal_update: shape mismatch");
  return add(target, pooled);
}

}  // namespace cmsa
