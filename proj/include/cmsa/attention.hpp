#pragma once

#include <array>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "cmsa/language.hpp"
#include "cmsa/optim.hpp"

namespace cmsa {

// Flattened (position, word) index used by every attention tensor in this
// header: row = p * N + n, i.e. position major, word minor.

/// Projection weights of one cross-modal self-attention block.
template <class T>
struct CmsaParams {
  Tensor<T> w_q, w_k, w_v;  // [d_k x D]
  Tensor<T> w_vhat;         // [D x d_k]

  std::size_t key_dim() const { return w_q.dim(0); }
  std::size_t feature_dim() const { return w_q.dim(1); }
};

/// Registers the four matrices under `prefix` with fan-in scaled uniform init.
template <class T>
CmsaParams<T> make_cmsa_params(ParamStore<T>& store, const std::string& prefix, std::size_t feature_dim,
                               std::size_t key_dim, Rng& rng) {
  if (key_dim == 0 || feature_dim == 0) throw UsageError("cmsa: dimensions must be positive");
  const double in_bound = std::sqrt(3.0 / double(feature_dim));
  const double out_bound = std::sqrt(3.0 / double(key_dim));
  CmsaParams<T> p;
  p.w_q = store.add(prefix + ".w_q", uniform_tensor<T>({key_dim, feature_dim}, -in_bound, in_bound, rng));
  p.w_k = store.add(prefix + ".w_k", uniform_tensor<T>({key_dim, feature_dim}, -in_bound, in_bound, rng));
  p.w_v = store.add(prefix + ".w_v", uniform_tensor<T>({key_dim, feature_dim}, -in_bound, in_bound, rng));
  p.w_vhat = store.add(prefix + ".w_vhat", uniform_tensor<T>({feature_dim, key_dim}, -out_bound, out_bound, rng));
  return p;
}

template <class T>
struct Qkv {
  Tensor<T> q, k, v;  // [(H*W*N) x d_k]
};

/// q = W_q f, k = W_k f, v = W_v f for every (p, n) of F [N x H x W x D].
template <class T>
Qkv<T> project_qkv(const Tensor<T>& features, const CmsaParams<T>& params) {
  if (features.rank() != 4) throw DimensionError("project_qkv: F must be [N x H x W x D]");
  const std::size_t n = features.dim(0), h = features.dim(1), w = features.dim(2), d = features.dim(3);
  if (d != params.feature_dim())
    throw DimensionError("project_qkv: feature dim " + std::to_string(d) + " but projections expect " +
                         std::to_string(params.feature_dim()));
  auto flat = reshape(permute(features, {1, 2, 0, 3}), {h * w * n, d});
  return {matmul(flat, params.w_q, false, true), matmul(flat, params.w_k, false, true),
          matmul(flat, params.w_v, false, true)};
}

/// Expands a per-word validity mask to the flattened (p, n) index.
inline std::vector<std::uint8_t> expand_word_mask(std::span<const std::uint8_t> words, std::size_t positions) {
  std::vector<std::uint8_t> cols;
  cols.reserve(words.size() * positions);
  for (std::size_t p = 0; p < positions; ++p) cols.insert(cols.end(), words.begin(), words.end());
  return cols;
}

struct AttentionOptions {
  bool scaled = false;  // divide scores by sqrt(d_k)
};

template <class T>
struct AttentionResult {
  Tensor<T> out;     // [M x d_v], row r = sum_c A[r, c] * v_c
  Tensor<T> scores;  // A: [M x M], rows sum to 1
};

/// Joint self-attention: S[r, c] = q_c . k_r, A = row-softmax(S) over the
/// valid columns (invalid columns are exactly 0), out = A V.
template <class T>
AttentionResult<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             std::span<const std::uint8_t> valid_cols = {}, AttentionOptions opt = {}) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape() != k.shape() || v.dim(0) != q.dim(0))
    throw DimensionError("attention: Q, K must be equal [M x d] and V [M x dv]; got " + to_string(q.shape()) + ", " +
                         to_string(k.shape()) + ", " + to_string(v.shape()));
  auto s = matmul(k, q, false, true);
  if (opt.scaled) s = scalar_mul(s, T(1) / std::sqrt(T(q.dim(1))));
  auto a = softmax(s, 1, valid_cols);
  return {matmul(a, v), a};
}

/// Row-blocked evaluation of `attention(...).out` that never materializes the
/// full score matrix. Every row is accumulated in double in fixed column
/// order, so the result does not depend on the block size. Also returns the
/// per-column sums of A restricted to `valid_rows` (used by attention pooling).
template <class T>
struct BlockedAttention {
  Tensor<T> out;
  std::vector<double> column_sums;
};

template <class T>
BlockedAttention<T> attention_blocked(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                      std::span<const std::uint8_t> valid_cols, std::span<const std::uint8_t> valid_rows,
                                      std::size_t block_rows, AttentionOptions opt = {}) {
  if (q.rank() != 2 || q.shape() != k.shape() || v.rank() != 2 || v.dim(0) != q.dim(0))
    throw DimensionError("attention_blocked: shape mismatch");
  if (block_rows == 0) throw UsageError("attention_blocked: block_rows must be positive");
  const std::size_t m = q.dim(0), d = q.dim(1), dv = v.dim(1);
  auto col_ok = [&](std::size_t c) { return valid_cols.empty() || valid_cols[c] != 0; };
  auto row_ok = [&](std::size_t r) { return valid_rows.empty() || valid_rows[r] != 0; };
  const double scale = opt.scaled ? 1.0 / std::sqrt(double(d)) : 1.0;
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();

  std::vector<T> out(m * dv);
  std::vector<double> colsum(m, 0.0);
  std::vector<double> srow(m), acc(dv);
  for (std::size_t r0 = 0; r0 < m; r0 += block_rows) {
    const std::size_t r1 = std::min(m, r0 + block_rows);
    for (std::size_t r = r0; r < r1; ++r) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < m; ++c) {
        if (!col_ok(c)) continue;
        double dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += double(qd[c * d + j]) * double(kd[r * d + j]);
        srow[c] = dot * scale;
        mx = std::max(mx, srow[c]);
      }
      if (!std::isfinite(mx)) throw InputError("attention_blocked: every column is masked");
      double z = 0;
      for (std::size_t c = 0; c < m; ++c) {
        srow[c] = col_ok(c) ? std::exp(srow[c] - mx) : 0.0;
        z += srow[c];
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t c = 0; c < m; ++c) {
        if (srow[c] == 0.0) continue;
        const double a = srow[c] / z;
        if (row_ok(r)) colsum[c] += a;
        for (std::size_t j = 0; j < dv; ++j) acc[j] += a * double(vd[c * dv + j]);
      }
      for (std::size_t j = 0; j < dv; ++j) out[r * dv + j] = T(acc[j]);
    }
  }
  return {Tensor<T>({m, dv}, std::move(out)), std::move(colsum)};
}

/// f^_pn = W_vhat v^_pn + f_pn, returned as [N x H x W x D].
template <class T>
Tensor<T> residual_transform(const Tensor<T>& attended, const Tensor<T>& features, const CmsaParams<T>& params) {
  if (features.rank() != 4) throw DimensionError("residual_transform: F must be [N x H x W x D]");
  const std::size_t n = features.dim(0), h = features.dim(1), w = features.dim(2), d = features.dim(3);
  if (attended.rank() != 2 || attended.dim(0) != h * w * n)
    throw DimensionError("residual_transform: attended features do not match F");
  auto back = matmul(attended, params.w_vhat, false, true);  // [(HWN) x D]
  auto aligned = permute(reshape(back, {h, w, n, d}), {2, 0, 1, 3});
  return add(aligned, features);
}

/// Per-word attention: for each word n, the attention that valid rows send to
/// the columns of word n, summed over positions; softmax over valid words.
template <class T>
Tensor<T> word_attention(const Tensor<T>& scores, std::span<const std::uint8_t> word_mask) {
  const std::size_t n = word_mask.size();
  if (scores.rank() != 2 || scores.dim(0) != scores.dim(1) || n == 0 || scores.dim(0) % n != 0)
    throw DimensionError("word_attention: scores must be square with a multiple of N rows");
  const std::size_t positions = scores.dim(0) / n;
  auto rows = expand_word_mask(word_mask, positions);
  auto received = sum(mul(scores, Tensor<T>({scores.dim(0), 1}, std::vector<T>(rows.begin(), rows.end()))), {0});
  auto per_word = sum(reshape(received, {positions, n}), {0});  // [N]
  return softmax(per_word, 0, word_mask);
}

/// f^_p = sum_n a_n f^_pn; [N x H x W x D] -> [H x W x D].
template <class T>
Tensor<T> word_pool(const Tensor<T>& features, const Tensor<T>& weights) {
  if (features.rank() != 4 || weights.rank() != 1 || weights.dim(0) != features.dim(0))
    throw DimensionError("word_pool: weights must have one entry per word slot");
  return sum(mul(features, reshape(weights, {weights.dim(0), 1, 1, 1})), {0});
}

template <class T>
struct CmsaOutput {
  Tensor<T> pooled;          // [H x W x D]
  Tensor<T> word_attention;  // [N_max], zero at PAD slots
};

struct CmsaOptions {
  AttentionOptions attention;
  // Evaluate through the factored projections (see cmsa_forward); the
  // unfactored path materializes F and the full residual map.
  bool factored = true;
};

namespace detail {

inline std::size_t valid_prefix(std::span<const std::uint8_t> mask) {
  std::size_t n = 0;
  while (n < mask.size() && mask[n]) ++n;
  for (std::size_t i = n; i < mask.size(); ++i)
    if (mask[i]) throw InputError("word mask must list valid words before padding");
  if (n == 0) throw InputError("expression has no valid words");
  return n;
}

// Column blocks of a [d_k x (Cv + Cl + 8)] projection.
template <class T>
struct SplitWeight {
  Tensor<T> visual, word, coord;
};

template <class T>
SplitWeight<T> split_columns(const Tensor<T>& w, std::size_t cv, std::size_t cl) {
  return {slice(w, 1, 0, cv), slice(w, 1, cv, cl), slice(w, 1, cv + cl, 8)};
}

}  // namespace detail

/// Full cross-modal self-attention block for one feature level.
///
/// visual [Cv x H x W], words [N_max x Cl], coords [8 x H x W], word mask of
/// length N_max. Returns the word-pooled map and the per-word attention.
///
/// The factored path never builds F. Because f_pn concatenates a
/// position part and a word part, W f_pn = W_pos [v_p; s_p] + W_word e_n,
/// and since pooling weights sum to one the residual can be pooled before
/// the output projection. PAD slots are dropped up front; they carry zero
/// attention in and out, so this is exact.
template <class T>
CmsaOutput<T> cmsa_forward(const Tensor<T>& visual, const Tensor<T>& words, const Tensor<T>& coords,
                           std::span<const std::uint8_t> mask, const CmsaParams<T>& params, CmsaOptions opt = {}) {
  if (visual.rank() != 3 || words.rank() != 2) throw DimensionError("cmsa_forward: bad input ranks");
  const std::size_t cv = visual.dim(0), h = visual.dim(1), w = visual.dim(2), cl = words.dim(1);
  const std::size_t n_max = words.dim(0), positions = h * w;
  const std::size_t d = cv + cl + 8;
  if (params.feature_dim() != d)
    throw DimensionError("cmsa_forward: projections expect D=" + std::to_string(params.feature_dim()) + ", inputs give " +
                         std::to_string(d));

  if (!opt.factored) {
    auto f = build_multimodal(visual, words, coords, mask);
    auto qkv = project_qkv(f, params);
    auto cols = expand_word_mask(mask, positions);
    auto att = attention(qkv.q, qkv.k, qkv.v, cols, opt.attention);
    auto a = word_attention(att.scores, mask);
    auto fhat = residual_transform(att.out, f, params);
    return {word_pool(fhat, a), a};
  }

  const std::size_t n = detail::valid_prefix(mask);
  auto v = l2_normalize(reshape(permute(visual, {1, 2, 0}), {positions, cv}), 1);  // [P x Cv]
  auto e = l2_normalize(slice(words, 0, 0, n), 1);                                 // [n x Cl]
  auto s = reshape(permute(coords, {1, 2, 0}), {positions, 8});                    // [P x 8]

  auto project = [&](const Tensor<T>& weight) {
    auto part = detail::split_columns(weight, cv, cl);
    auto pos = add(matmul(v, part.visual, false, true), matmul(s, part.coord, false, true));  // [P x dk]
    auto word = matmul(e, part.word, false, true);                                            // [n x dk]
    const std::size_t dk = weight.dim(0);
    return reshape(add(reshape(pos, {positions, 1, dk}), reshape(word, {1, n, dk})), {positions * n, dk});
  };
  auto att = attention(project(params.w_q), project(params.w_k), project(params.w_v), {}, opt.attention);

  const std::size_t dk = params.key_dim();
  auto received = sum(reshape(sum(att.scores, {0}), {positions, n}), {0});  // [n]
  auto a = softmax(received, 0);

  auto pooled_attended = sum(mul(reshape(att.out, {positions, n, dk}), reshape(a, {1, n, 1})), {1});  // [P x dk]
  auto pooled_words = matmul(reshape(a, {1, n}), e);                                               // [1 x Cl]
  auto pooled_input = concat<T>({v, add(pooled_words, Tensor<T>::zeros({positions, 1})), s}, 1);  // [P x D]
  auto pooled = add(matmul(pooled_attended, params.w_vhat, false, true), pooled_input);

  auto full_a = n == n_max ? a : concat<T>({a, Tensor<T>::zeros({n_max - n})}, 0);
  return {reshape(pooled, {h, w, d}), full_a};
}

/// Ablation stand-in for the block: average of f_pn over the valid words,
/// with uniform word weights.
template <class T>
CmsaOutput<T> mean_pooled_multimodal(const Tensor<T>& visual, const Tensor<T>& words, const Tensor<T>& coords,
                                     std::span<const std::uint8_t> mask) {
  const std::size_t cv = visual.dim(0), h = visual.dim(1), w = visual.dim(2), cl = words.dim(1);
  const std::size_t n = detail::valid_prefix(mask), positions = h * w;
  auto v = l2_normalize(reshape(permute(visual, {1, 2, 0}), {positions, cv}), 1);
  auto e = mean(l2_normalize(slice(words, 0, 0, n), 1), {0}, true);  // [1 x Cl]
  auto s = reshape(permute(coords, {1, 2, 0}), {positions, 8});
  auto pooled = concat<T>({v, add(e, Tensor<T>::zeros({positions, 1})), s}, 1);
  std::vector<T> uniform(mask.size(), T(0));
  for (std::size_t i = 0; i < n; ++i) uniform[i] = T(1) / T(n);
  return {reshape(pooled, {h, w, cv + cl + 8}), Tensor<T>({mask.size()}, std::move(uniform))};
}

/// Stacks per-level word attention into a [levels x n_real] matrix (row i = level i+1).
template <class T>
Tensor<T> word_attention_matrix(const std::vector<Tensor<T>>& levels, std::size_t n_real) {
  if (levels.empty()) throw UsageError("word_attention_matrix: no levels");
  std::vector<T> data;
  for (const auto& a : levels) {
    if (a.rank() != 1 || a.dim(0) < n_real || n_real == 0)
      throw DimensionError("word_attention_matrix: attention vector shorter than n_real");
    data.insert(data.end(), a.data().begin(), a.data().begin() + std::ptrdiff_t(n_real));
  }
  return Tensor<T>({levels.size(), n_real}, std::move(data));
}

/// CSV with a header of word tokens and one row per level, 6 decimals.
template <class T>
void write_word_attention_csv(std::ostream& out, const Tensor<T>& matrix, const std::vector<std::string>& words) {
  if (matrix.rank() != 2 || words.size() != matrix.dim(1))
    throw DimensionError("write_word_attention_csv: header does not match matrix columns");
  out << "level";
  for (const auto& wd : words) out << ',' << wd;
  out << '\n' << std::fixed << std::setprecision(6);
  for (std::size_t r = 0; r < matrix.dim(0); ++r) {
    out << 'l' << (r + 1);
    for (std::size_t c = 0; c < matrix.dim(1); ++c) out << ',' << double(matrix.at({r, c}));
    out << '\n';
  }
}

}  // namespace cmsa
