#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cmsa/attention.hpp"
#include "cmsa/fusion.hpp"
#include "cmsa/video.hpp"

namespace cmsa::testing {

using TensorD = Tensor<double>;

struct GradReport {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

/// Compares backward() against central differences for every element of
/// every input. `f` maps the inputs to a scalar. Element-wise relative error
/// uses the denominator max(|a|, |b|, 1e-8).
inline GradReport gradcheck(const std::function<TensorD(const std::vector<TensorD>&)>& f, std::vector<TensorD> inputs,
                            double h = 1e-5) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.clear_grad();
  }
  backward(f(inputs));
  GradReport rep;
  for (auto& x : inputs) {
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      auto d = x.mutable_data();
      const double orig = d[i];
      double plus, minus;
      {
        NoGradGuard g;
        d[i] = orig + h;
        plus = f(inputs).item();
        d[i] = orig - h;
        minus = f(inputs).item();
        d[i] = orig;
      }
      const double numeric = (plus - minus) / (2 * h);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
      rep.max_rel_error = std::max(rep.max_rel_error, std::abs(numeric - analytic[i]) / denom);
      ++rep.checked;
    }
  }
  return rep;
}

/// Weighted sum with fixed random weights, so every output element matters.
inline TensorD probe(const TensorD& out, Rng& rng) {
  auto w = uniform_tensor<double>(out.shape(), -1.0, 1.0, rng);
  return sum(mul(out, w));
}

/// Literal reference for joint attention over (p, n): scores
/// s = q_{p'n'} . k_{pn}, softmax over (p', n') with masked words skipped,
/// output sum_{p'n'} a v_{p'n'}. Index order matches the library (p major).
struct AttentionOracle {
  std::vector<double> out;     // [M x dv]
  std::vector<double> scores;  // [M x M]
};

inline AttentionOracle attention_oracle(const std::vector<double>& q, const std::vector<double>& k,
                                        const std::vector<double>& v, std::size_t positions, std::size_t words,
                                        std::size_t dk, std::size_t dv, const std::vector<std::uint8_t>& word_mask,
                                        bool scaled = false) {
  const std::size_t m = positions * words;
  AttentionOracle o{std::vector<double>(m * dv, 0.0), std::vector<double>(m * m, 0.0)};
  for (std::size_t p = 0; p < positions; ++p)
    for (std::size_t n = 0; n < words; ++n) {
      const std::size_t row = p * words + n;
      std::vector<double> e(m, 0.0);
      double mx = -INFINITY;
      for (std::size_t p2 = 0; p2 < positions; ++p2)
        for (std::size_t n2 = 0; n2 < words; ++n2) {
          if (!word_mask.empty() && !word_mask[n2]) continue;
          const std::size_t col = p2 * words + n2;
          double s = 0;
          for (std::size_t j = 0; j < dk; ++j) s += q[col * dk + j] * k[row * dk + j];
          if (scaled) s /= std::sqrt(double(dk));
          e[col] = s;
          mx = std::max(mx, s);
        }
      double z = 0;
      for (std::size_t p2 = 0; p2 < positions; ++p2)
        for (std::size_t n2 = 0; n2 < words; ++n2) {
          const std::size_t col = p2 * words + n2;
          if (!word_mask.empty() && !word_mask[n2]) {
            e[col] = 0;
            continue;
          }
          e[col] = std::exp(e[col] - mx);
          z += e[col];
        }
      for (std::size_t p2 = 0; p2 < positions; ++p2)
        for (std::size_t n2 = 0; n2 < words; ++n2) {
          const std::size_t col = p2 * words + n2;
          const double a = e[col] / z;
          o.scores[row * m + col] = a;
          for (std::size_t j = 0; j < dv; ++j) o.out[row * dv + j] += a * v[col * dv + j];
        }
    }
  return o;
}

/// Literal reference for the whole cross-modal block on small inputs, built
/// from explicit loops over (p, n, p', n'): concatenated features, QKV,
/// attention, residual, word weights from attention received per word, pooling.
struct CmsaOracle {
  std::vector<double> pooled;  // [P x D]
  std::vector<double> word_attention;
};

inline CmsaOracle cmsa_oracle(const TensorD& visual, const TensorD& words, const TensorD& coords,
                              const std::vector<std::uint8_t>& mask, const CmsaParams<double>& prm) {
  const std::size_t cv = visual.dim(0), h = visual.dim(1), w = visual.dim(2), cl = words.dim(1), nmax = words.dim(0);
  const std::size_t P = h * w, D = cv + cl + 8, dk = prm.key_dim();
  auto normalize = [](std::vector<double> x) {
    double s = 0;
    for (double v : x) s += v * v;
    s = std::max(std::sqrt(s), 1e-12);
    for (auto& v : x) v /= s;
    return x;
  };
  // f[p][n] (D-vector)
  std::vector<std::vector<std::vector<double>>> f(P, std::vector<std::vector<double>>(nmax));
  for (std::size_t p = 0; p < P; ++p) {
    std::vector<double> vp(cv), sp(8);
    for (std::size_t c = 0; c < cv; ++c) vp[c] = visual[c * P + p];
    for (std::size_t c = 0; c < 8; ++c) sp[c] = coords[c * P + p];
    vp = normalize(vp);
    for (std::size_t n = 0; n < nmax; ++n) {
      std::vector<double> en(cl, 0.0);
      if (mask[n]) {
        for (std::size_t c = 0; c < cl; ++c) en[c] = words[n * cl + c];
        en = normalize(en);
      }
      auto& fv = f[p][n];
      fv.insert(fv.end(), vp.begin(), vp.end());
      fv.insert(fv.end(), en.begin(), en.end());
      fv.insert(fv.end(), sp.begin(), sp.end());
    }
  }
  auto proj = [&](const TensorD& W, const std::vector<double>& x) {
    std::vector<double> y(W.dim(0), 0.0);
    for (std::size_t i = 0; i < W.dim(0); ++i)
      for (std::size_t j = 0; j < W.dim(1); ++j) y[i] += W[i * W.dim(1) + j] * x[j];
    return y;
  };
  const std::size_t M = P * nmax;
  std::vector<double> q(M * dk), k(M * dk), v(M * dk);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t n = 0; n < nmax; ++n) {
      const auto r = p * nmax + n;
      auto qq = proj(prm.w_q, f[p][n]), kk = proj(prm.w_k, f[p][n]), vv = proj(prm.w_v, f[p][n]);
      std::copy(qq.begin(), qq.end(), q.begin() + std::ptrdiff_t(r * dk));
      std::copy(kk.begin(), kk.end(), k.begin() + std::ptrdiff_t(r * dk));
      std::copy(vv.begin(), vv.end(), v.begin() + std::ptrdiff_t(r * dk));
    }
  auto att = attention_oracle(q, k, v, P, nmax, dk, dk, mask);
  // word weights: attention received by word n from valid rows
  std::vector<double> recv(nmax, 0.0);
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t n = 0; n < nmax; ++n) {
      if (!mask[n]) continue;
      for (std::size_t p2 = 0; p2 < P; ++p2)
        for (std::size_t n2 = 0; n2 < nmax; ++n2) recv[n2] += att.scores[(p * nmax + n) * M + p2 * nmax + n2];
    }
  double mx = -INFINITY, z = 0;
  for (std::size_t n = 0; n < nmax; ++n)
    if (mask[n]) mx = std::max(mx, recv[n]);
  std::vector<double> a(nmax, 0.0);
  for (std::size_t n = 0; n < nmax; ++n)
    if (mask[n]) z += (a[n] = std::exp(recv[n] - mx));
  for (auto& x : a) x /= z;
  CmsaOracle o{std::vector<double>(P * D, 0.0), a};
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t n = 0; n < nmax; ++n) {
      std::vector<double> vh(att.out.begin() + std::ptrdiff_t((p * nmax + n) * dk),
                             att.out.begin() + std::ptrdiff_t((p * nmax + n + 1) * dk));
      auto back = proj(prm.w_vhat, vh);
      for (std::size_t j = 0; j < D; ++j) o.pooled[p * D + j] += a[n] * (back[j] + f[p][n][j]);
    }
  return o;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T>
std::vector<double> as_double(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

/// Mask with n_real leading ones.
inline std::vector<std::uint8_t> prefix_mask(std::size_t n_max, std::size_t n_real) {
  std::vector<std::uint8_t> m(n_max, 0);
  std::fill(m.begin(), m.begin() + std::ptrdiff_t(n_real), 1);
  return m;
}

/// Random block parameters registered in a throwaway store.
template <class T>
CmsaParams<T> random_cmsa(std::size_t D, std::size_t dk, Rng& rng, double scale = 1.0) {
  CmsaParams<T> p;
  p.w_q = uniform_tensor<T>({dk, D}, -scale, scale, rng);
  p.w_k = uniform_tensor<T>({dk, D}, -scale, scale, rng);
  p.w_v = uniform_tensor<T>({dk, D}, -scale, scale, rng);
  p.w_vhat = uniform_tensor<T>({D, dk}, -scale, scale, rng);
  return p;
}

}  // namespace cmsa::testing
