#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cmsa/encoder.hpp"
#include "cmsa/metrics.hpp"
#include "support.hpp"

namespace cmsa::testing {

struct NamedResult {
  std::string name;
  double value = 0;
};

using GradCase = std::function<GradReport(Rng&)>;

/// Every differentiable op and the composed blocks on toy shapes.
inline std::vector<std::pair<std::string, GradCase>> gradient_cases() {
  std::vector<std::pair<std::string, GradCase>> cases;
  auto u = [](Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) { return uniform_tensor<double>(std::move(s), lo, hi, rng); };
  // Values bounded away from zero, for ops with a kink there.
  auto away = [&](Shape s, Rng& rng) {
    auto t = u(s, rng, 0.1, 1.0);
    std::bernoulli_distribution coin(0.5);
    for (auto& v : t.mutable_data()) v = coin(rng) ? v : -v;
    return t;
  };
  auto fixed_probe = [](std::uint64_t seed) {
    return [seed](const TensorD& out) {
      Rng r(seed);
      return probe(out, r);
    };
  };

  cases.emplace_back("add (broadcast)", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(add(x[0], x[1])); }, {u({2, 3}, rng), u({1, 3}, rng)});
  });
  cases.emplace_back("sub (broadcast)", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(sub(x[0], x[1])); }, {u({2, 3}, rng), u({2, 1}, rng)});
  });
  cases.emplace_back("mul (broadcast)", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(mul(x[0], x[1])); }, {u({2, 1, 3}, rng), u({1, 2, 3}, rng)});
  });
  cases.emplace_back("scalar_mul / add_scalar / one_minus", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(one_minus(add_scalar(scalar_mul(x[0], 1.7), 0.3))); }, {u({2, 3}, rng)});
  });
  cases.emplace_back("tanh", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(tanh(x[0])); }, {u({2, 3}, rng, -2, 2)});
  });
  cases.emplace_back("sigmoid", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(sigmoid(x[0])); }, {u({2, 3}, rng, -4, 4)});
  });
  cases.emplace_back("relu", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(relu(x[0])); }, {away({2, 3}, rng)});
  });
  for (int variant = 0; variant < 4; ++variant) {
    const bool ta = variant & 1, tb = variant & 2;
    cases.emplace_back(std::string("matmul") + (ta ? " A^T" : "") + (tb ? " B^T" : ""), [=](Rng& rng) {
      auto pr = fixed_probe(rng());
      Shape sa = ta ? Shape{3, 2} : Shape{2, 3}, sb = tb ? Shape{4, 3} : Shape{3, 4};
      return gradcheck([=](const auto& x) { return pr(matmul(x[0], x[1], ta, tb)); }, {u(sa, rng), u(sb, rng)});
    });
  }
  cases.emplace_back("softmax (axis 0)", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(softmax(x[0], 0)); }, {u({3, 2}, rng, -2, 2)});
  });
  cases.emplace_back("softmax (masked, axis 1)", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    const std::vector<std::uint8_t> valid{1, 0, 1, 1};
    return gradcheck([=](const auto& x) { return pr(softmax(x[0], 1, valid)); }, {u({2, 4}, rng, -2, 2)});
  });
  cases.emplace_back("l2_normalize", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(l2_normalize(x[0], 1)); }, {away({2, 3}, rng)});
  });
  cases.emplace_back("sum / mean / max", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck(
        [=](const auto& x) {
          return add(add(pr(sum(x[0], {0})), pr(mean(x[0], {1, 2}, true))), pr(reduce(ReduceOp::max, x[0], {2})));
        },
        {u({2, 2, 3}, rng)});
  });
  cases.emplace_back("reshape / permute / transpose", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(transpose(reshape(permute(x[0], {2, 0, 1}), {2, 6}))); },
                     {u({2, 3, 2}, rng)});
  });
  cases.emplace_back("slice / concat", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(concat<double>({slice(x[0], 1, 1, 2), x[1], slice(x[0], 1, 0, 1)}, 1)); },
                     {u({2, 3}, rng), u({2, 2}, rng)});
  });
  cases.emplace_back("gather_rows", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    const std::vector<std::size_t> idx{2, 0, 1, 2};
    return gradcheck([=](const auto& x) { return pr(gather_rows(x[0], std::span<const std::size_t>(idx), std::size_t(0))); },
                     {u({4, 3}, rng)});
  });
  for (auto [stride, dil, k] : std::vector<std::array<std::size_t, 3>>{{1, 1, 3}, {2, 1, 3}, {1, 2, 3}, {1, 1, 1}}) {
    cases.emplace_back("conv2d s" + std::to_string(stride) + " d" + std::to_string(dil) + " k" + std::to_string(k),
                       [=](Rng& rng) {
                         auto pr = fixed_probe(rng());
                         ConvOptions opt{stride, dil, true};
                         return gradcheck([=](const auto& x) { return pr(conv2d(x[0], x[1], opt)); },
                                          {u({2, 4, 4}, rng), u({2, 2, k, k}, rng)});
                       });
  }
  cases.emplace_back("upsample_bilinear", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    return gradcheck([=](const auto& x) { return pr(upsample_bilinear(x[0], 5, 4)); }, {u({2, 2, 3}, rng)});
  });
  cases.emplace_back("bce_loss", [=](Rng& rng) {
    auto y = TensorD({2, 3}, {1, 0, 1, 0, 0, 1});
    return gradcheck([=](const auto& x) { return bce_loss(x[0], y); }, {u({2, 3}, rng, 0.05, 0.95)});
  });
  cases.emplace_back("build_multimodal", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    const auto coords = spatial_coords<double>(2, 2);
    const std::vector<std::uint8_t> mask{1, 1, 0};
    return gradcheck([=](const auto& x) { return pr(build_multimodal(x[0], x[1], coords, mask)); },
                     {away({3, 2, 2}, rng), away({3, 4}, rng)});
  });
  for (bool factored : {false, true}) {
    cases.emplace_back(std::string("cmsa block (") + (factored ? "factored" : "unfactored") + ")", [=](Rng& rng) {
      auto pr = fixed_probe(rng());
      // Random coordinate maps: the real map has spatially constant channels whose
      // W_q / W_k columns get an exactly zero gradient (see cmsa_real_coords_gradient).
      const std::vector<std::uint8_t> mask{1, 1, 0};
      const std::size_t D = 3 + 4 + 8, dk = 3;
      CmsaOptions opt;
      opt.factored = factored;
      auto f = [=](const std::vector<TensorD>& x) {
        CmsaParams<double> p{x[2], x[3], x[4], x[5]};
        auto out = cmsa_forward(x[0], x[1], x[6], mask, p, opt);
        return add(pr(out.pooled), pr(out.word_attention));
      };
      return gradcheck(f, {away({3, 2, 2}, rng), away({3, 4}, rng), u({dk, D}, rng), u({dk, D}, rng), u({dk, D}, rng),
                           u({D, dk}, rng), u({8, 2, 2}, rng)});
    });
  }
  cases.emplace_back("fusion head + loss", [=](Rng& rng) {
    const std::array<std::size_t, 3> dims{3, 4, 5};
    const std::size_t df = 3;
    auto y = TensorD({4, 4}, std::vector<double>(16, 0.0));
    {
      auto d = y.mutable_data();
      for (std::size_t i : {5, 6, 9, 10}) d[i] = 1;
    }
    std::vector<TensorD> in;
    for (auto d : dims) in.push_back(u({2, 2, d}, rng));
    for (auto d : dims) in.push_back(u({df, d}, rng));  // proj
    for (int i = 0; i < 3; ++i) {
      in.push_back(u({1, df}, rng));
      in.push_back(u({1, 1}, rng));
      in.push_back(u({1, df}, rng));
      in.push_back(u({1, 1}, rng));
    }
    in.push_back(u({3}, rng, 0.5, 1.5));        // gamma
    in.push_back(u({1, df, 3, 3}, rng));        // pred kernel
    in.push_back(u({1, 1, 1}, rng));            // pred bias
    auto f = [=](const std::vector<TensorD>& x) {
      std::array<TensorD, 3> lv;
      std::array<Gates<double>, 3> g;
      for (std::size_t i = 0; i < 3; ++i) {
        lv[i] = project_level(x[i], x[3 + i]);
        const std::size_t b = 6 + 4 * i;
        g[i] = compute_gates(lv[i], x[b], x[b + 1], x[b + 2], x[b + 3]);
      }
      auto fused = gated_fuse(lv, g, x[18]);
      auto pred = predict_mask(fused, x[19], x[20], 4, 4);
      return bce_loss(pred.probability, y);
    };
    return gradcheck(f, in);
  });
  cases.emplace_back("cfsa block", [=](Rng& rng) {
    auto pr = fixed_probe(rng());
    const std::size_t c = 3, dk = 2;
    auto f = [=](const std::vector<TensorD>& x) {
      CfsaParams<double> p{x[3], x[4], x[5]};
      std::vector<TensorD> clip{x[0], x[1], x[2]};
      auto att = cfsa_attention(clip, p);
      auto pooled = frame_pool(att.out, att.scores, 3, 2, 2);
      return add(pr(temporal_update(x[1], pooled.pooled)), pr(pooled.weights));
    };
    return gradcheck(f, {u({c, 2, 2}, rng), u({c, 2, 2}, rng), u({c, 2, 2}, rng), u({dk, c}, rng), u({dk, c}, rng),
                         u({c, c}, rng)});
  });
  return cases;
}

/// The cross-modal block with the real coordinate map. Elements whose true
/// gradient is structurally zero must agree in absolute terms (both below
/// `zero_tol`); every other element must meet the relative tolerance.
struct RealCoordsGradient {
  double max_rel_error = 0;      // over elements with a non-negligible gradient
  double max_zero_abs = 0;       // largest |numeric| among structurally zero elements
  std::size_t structural_zeros = 0;
};

inline RealCoordsGradient cmsa_real_coords_gradient(std::uint64_t seed, bool factored, double h = 1e-5) {
  Rng rng(seed);
  const std::uint64_t probe_seed = rng();
  const auto coords = spatial_coords<double>(2, 2);
  const std::vector<std::uint8_t> mask{1, 1, 0};
  const std::size_t D = 15, dk = 3;
  CmsaOptions opt;
  opt.factored = factored;
  auto f = [&](const std::vector<TensorD>& x) {
    CmsaParams<double> p{x[2], x[3], x[4], x[5]};
    auto out = cmsa_forward(x[0], x[1], coords, mask, p, opt);
    Rng r(probe_seed);
    return probe(out.pooled, r);
  };
  std::vector<TensorD> in{uniform_tensor<double>({3, 2, 2}, -1, 1, rng), uniform_tensor<double>({3, 4}, -1, 1, rng),
                          uniform_tensor<double>({dk, D}, -1, 1, rng),   uniform_tensor<double>({dk, D}, -1, 1, rng),
                          uniform_tensor<double>({dk, D}, -1, 1, rng),   uniform_tensor<double>({D, dk}, -1, 1, rng)};
  for (auto& x : in) x.set_requires_grad(true);
  backward(f(in));
  RealCoordsGradient r;
  for (auto& x : in) {
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      auto d = x.mutable_data();
      const double orig = d[i];
      double plus, minus;
      {
        NoGradGuard g;
        d[i] = orig + h;
        plus = f(in).item();
        d[i] = orig - h;
        minus = f(in).item();
        d[i] = orig;
      }
      const double numeric = (plus - minus) / (2 * h);
      if (std::abs(analytic[i]) < 1e-12) {
        ++r.structural_zeros;
        r.max_zero_abs = std::max(r.max_zero_abs, std::abs(numeric));
      } else {
        const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
        r.max_rel_error = std::max(r.max_rel_error, std::abs(numeric - analytic[i]) / denom);
      }
    }
  }
  return r;
}

/// Runs every gradient case for `seeds` seeds; value = worst relative error.
inline std::vector<NamedResult> gradient_suite(std::size_t seeds) {
  std::vector<NamedResult> out;
  for (const auto& [name, fn] : gradient_cases()) {
    double worst = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(derive_seed(0xC0DE, s * 131 + out.size()));
      worst = std::max(worst, fn(rng).max_rel_error);
    }
    out.push_back({name, worst});
  }
  return out;
}

struct OracleSummary {
  double cmsa_attention_error = 0;  // attention() vs nested loops
  double cmsa_block_error = 0;      // cmsa_forward (both paths) vs nested loops
  double cfsa_error = 0;            // cfsa_attention + frame weights vs nested loops
  double row_sum_error = 0;         // | row sum - 1 | over every attention matrix
};

/// `trials` random toys with H, W <= 3, N <= 3, d_k <= 4 (cmsa) and up to
/// 3 frames of 2x2 maps (cfsa).
inline OracleSummary attention_oracle_suite(std::size_t trials, std::uint64_t seed = 7) {
  OracleSummary s;
  Rng rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  auto row_sums = [&](const TensorD& a) {
    const std::size_t m = a.dim(0), c = a.dim(1);
    for (std::size_t r = 0; r < m; ++r) {
      double t = 0;
      for (std::size_t j = 0; j < c; ++j) t += a[r * c + j];
      s.row_sum_error = std::max(s.row_sum_error, std::abs(t - 1.0));
    }
  };
  for (std::size_t trial = 0; trial < trials; ++trial) {
    // raw attention over (p, n) with an arbitrary non-empty word mask
    {
      const std::size_t h = pick(1, 3), w = pick(1, 3), n = pick(1, 3), dk = pick(1, 4), dv = pick(1, 4);
      const std::size_t P = h * w, M = P * n;
      std::vector<std::uint8_t> wm(n);
      do {
        for (auto& b : wm) b = std::uint8_t(pick(0, 1));
      } while (std::count(wm.begin(), wm.end(), 1) == 0);
      auto q = uniform_tensor<double>({M, dk}, -2, 2, rng), k = uniform_tensor<double>({M, dk}, -2, 2, rng);
      auto v = uniform_tensor<double>({M, dv}, -2, 2, rng);
      const bool scaled = trial % 2 == 1;
      auto res = attention(q, k, v, expand_word_mask(wm, P), AttentionOptions{scaled});
      auto ref = attention_oracle(as_double(q), as_double(k), as_double(v), P, n, dk, dv, wm, scaled);
      s.cmsa_attention_error = std::max({s.cmsa_attention_error, max_abs_diff(as_double(res.out), ref.out),
                                         max_abs_diff(as_double(res.scores), ref.scores)});
      row_sums(res.scores);
    }
    // whole cross-modal block, both evaluation paths
    {
      const std::size_t h = pick(1, 3), w = pick(1, 3), nmax = pick(1, 3), nreal = pick(1, nmax), cv = pick(1, 3),
                        cl = pick(1, 3), dk = pick(1, 4);
      const std::size_t D = cv + cl + 8;
      auto visual = uniform_tensor<double>({cv, h, w}, -1, 1, rng);
      auto words = uniform_tensor<double>({nmax, cl}, -1, 1, rng);
      auto coords = spatial_coords<double>(h, w);
      auto mask = prefix_mask(nmax, nreal);
      auto prm = random_cmsa<double>(D, dk, rng);
      auto ref = cmsa_oracle(visual, words, coords, mask, prm);
      for (bool factored : {false, true}) {
        CmsaOptions opt;
        opt.factored = factored;
        auto out = cmsa_forward(visual, words, coords, mask, prm, opt);
        s.cmsa_block_error = std::max({s.cmsa_block_error, max_abs_diff(as_double(out.pooled), ref.pooled),
                                       max_abs_diff(as_double(out.word_attention), ref.word_attention)});
      }
    }
    // cross-frame attention and frame weights
    {
      const std::size_t frames = pick(1, 3), h = pick(1, 2), w = pick(1, 2), c = pick(1, 3), dk = pick(1, 4);
      const std::size_t P = h * w, M = frames * P;
      std::vector<TensorD> clip;
      for (std::size_t t = 0; t < frames; ++t) clip.push_back(uniform_tensor<double>({c, h, w}, -1, 1, rng));
      CfsaParams<double> prm{uniform_tensor<double>({dk, c}, -1, 1, rng), uniform_tensor<double>({dk, c}, -1, 1, rng),
                             uniform_tensor<double>({c, c}, -1, 1, rng)};
      std::vector<double> q(M * dk, 0), k(M * dk, 0), v(M * c, 0);
      for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t p = 0; p < P; ++p) {
          const std::size_t r = t * P + p;
          for (std::size_t i = 0; i < dk; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              q[r * dk + i] += prm.w_q[i * c + j] * clip[t][j * P + p];
              k[r * dk + i] += prm.w_k[i * c + j] * clip[t][j * P + p];
            }
          for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < c; ++j) v[r * c + i] += prm.w_v[i * c + j] * clip[t][j * P + p];
        }
      // (t, p) flattening is the oracle's (position, word) order with T "positions" and P "words".
      auto ref = attention_oracle(q, k, v, frames, P, dk, c, {});
      auto res = cfsa_attention(clip, prm);
      s.cfsa_error = std::max({s.cfsa_error, max_abs_diff(as_double(res.out), ref.out),
                               max_abs_diff(as_double(res.scores), ref.scores)});
      row_sums(res.scores);
      // frame weights: softmax over t of the attention received by frame t
      std::vector<double> recv(frames, 0.0), wt(frames);
      for (std::size_t r = 0; r < M; ++r)
        for (std::size_t t = 0; t < frames; ++t)
          for (std::size_t p = 0; p < P; ++p) recv[t] += ref.scores[r * M + t * P + p];
      const double mx = *std::max_element(recv.begin(), recv.end());
      double z = 0;
      for (std::size_t t = 0; t < frames; ++t) z += (wt[t] = std::exp(recv[t] - mx));
      for (auto& x : wt) x /= z;
      auto pooled = frame_pool(res.out, res.scores, frames, h, w);
      std::vector<double> pref(c * P, 0.0);
      for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t p = 0; p < P; ++p)
          for (std::size_t j = 0; j < c; ++j) pref[j * P + p] += wt[t] * ref.out[(t * P + p) * c + j];
      s.cfsa_error = std::max({s.cfsa_error, max_abs_diff(as_double(pooled.weights), wt),
                               max_abs_diff(as_double(pooled.pooled), pref)});
    }
  }
  return s;
}

struct IdentityResult {
  bool bypass = false;       // m = 0, r = 0  ->  F_o = X
  bool tanh_path = false;    // m = 0, r = 1  ->  F_o = tanh(X)
  bool zero_residual = false;  // W_vhat = 0  ->  block output equals its input F
};

inline IdentityResult fusion_identities(std::size_t trials = 20, std::uint64_t seed = 11) {
  IdentityResult r{true, true, true};
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    std::array<Tensor<float>, 3> x;
    for (auto& xi : x) xi = uniform_tensor<float>({4, 3, 2}, -3, 3, rng);
    auto gamma = uniform_tensor<float>({3}, -2, 2, rng);
    auto zeros = Tensor<float>::zeros({1, 3, 2}), ones = Tensor<float>::full({1, 3, 2}, 1.0f);
    std::array<Gates<float>, 3> g0{Gates<float>{zeros, zeros}, Gates<float>{zeros, zeros}, Gates<float>{zeros, zeros}};
    std::array<Gates<float>, 3> g1{Gates<float>{zeros, ones}, Gates<float>{zeros, ones}, Gates<float>{zeros, ones}};
    auto a = gated_fuse(x, g0, gamma), b = gated_fuse(x, g1, gamma);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto th = tanh(x[i]);
      for (std::size_t j = 0; j < x[i].numel(); ++j) {
        r.bypass &= a[i][j] == x[i][j];
        r.tanh_path &= b[i][j] == th[j];
      }
    }
    // zero output projection: residual map equals F, so the pooled map equals pooling F itself
    const std::size_t cv = 3, cl = 4, nmax = 3, D = cv + cl + 8;
    auto visual = uniform_tensor<float>({cv, 2, 2}, -1, 1, rng);
    auto words = uniform_tensor<float>({nmax, cl}, -1, 1, rng);
    auto coords = spatial_coords<float>(2, 2);
    auto mask = prefix_mask(nmax, 2);
    auto prm = random_cmsa<float>(D, 4, rng);
    prm.w_vhat = Tensor<float>::zeros({D, 4});
    auto f = build_multimodal(visual, words, coords, mask);
    auto qkv = project_qkv(f, prm);
    auto att = attention(qkv.q, qkv.k, qkv.v, expand_word_mask(mask, 4));
    auto fhat = residual_transform(att.out, f, prm);
    for (std::size_t j = 0; j < f.numel(); ++j) r.zero_residual &= fhat[j] == f[j];
    CmsaOptions lit;
    lit.factored = false;
    auto out = cmsa_forward(visual, words, coords, mask, prm, lit);
    auto direct = word_pool(f, out.word_attention);
    for (std::size_t j = 0; j < direct.numel(); ++j) r.zero_residual &= out.pooled[j] == direct[j];
  }
  return r;
}

struct PermutationResult {
  double attention_error = 0;  // | a(perm) - perm(a) |
  double pooled_error = 0;     // | pooled(perm) - pooled |
};

/// Permutes the valid words of random float32 inputs (both evaluation paths).
inline PermutationResult word_permutation_check(std::size_t trials = 50, std::uint64_t seed = 13) {
  PermutationResult r;
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t nmax = 5, nreal = 2 + t % 3, cv = 6, cl = 10, dk = 8;
    auto visual = uniform_tensor<float>({cv, 3, 3}, 0, 1, rng);
    auto words = uniform_tensor<float>({nmax, cl}, -1, 1, rng);
    {
      auto d = words.mutable_data();
      std::fill(d.begin() + std::ptrdiff_t(nreal * cl), d.end(), 0.0f);
    }
    auto coords = spatial_coords<float>(3, 3);
    auto mask = prefix_mask(nmax, nreal);
    ParamStore<float> store;
    auto prm = make_cmsa_params(store, "b", cv + cl + 8, dk, rng);
    std::vector<std::size_t> perm(nreal);
    std::iota(perm.begin(), perm.end(), std::size_t(0));
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<float> pw(words.data().begin(), words.data().end());
    for (std::size_t i = 0; i < nreal; ++i)
      std::copy_n(words.data().begin() + std::ptrdiff_t(perm[i] * cl), cl, pw.begin() + std::ptrdiff_t(i * cl));
    Tensor<float> permuted({nmax, cl}, pw);
    for (bool factored : {true, false}) {
      CmsaOptions opt;
      opt.factored = factored;
      auto base = cmsa_forward(visual, words, coords, mask, prm, opt);
      auto moved = cmsa_forward(visual, permuted, coords, mask, prm, opt);
      for (std::size_t i = 0; i < nreal; ++i)
        r.attention_error = std::max(r.attention_error, double(std::abs(moved.word_attention[i] - base.word_attention[perm[i]])));
      for (std::size_t j = 0; j < base.pooled.numel(); ++j)
        r.pooled_error = std::max(r.pooled_error, double(std::abs(moved.pooled[j] - base.pooled[j])));
    }
  }
  return r;
}

/// Named pass/fail results for the metric examples and the prec@X monotonicity property.
inline std::vector<std::pair<std::string, bool>> metric_examples(std::size_t monotone_trials = 1000) {
  std::vector<std::pair<std::string, bool>> out;
  using M = std::vector<std::uint8_t>;
  out.emplace_back("iou identical", iou(M{1, 0, 1, 1}, M{1, 0, 1, 1}) == 1.0);
  out.emplace_back("iou disjoint", iou(M{1, 1, 0, 0}, M{0, 0, 1, 1}) == 0.0);
  out.emplace_back("iou top row of 2x2", iou(M{1, 1, 0, 0}, M{1, 1, 1, 1}) == 0.5);
  out.emplace_back("iou both empty", iou(M{0, 0}, M{0, 0}) == 1.0);
  const std::vector<IouCounts> two{{1, 2}, {3, 4}};
  out.emplace_back("overall_iou (1,2),(3,4)", overall_iou(two) == 4.0 / 6.0);
  out.emplace_back("overall_iou one sample", overall_iou(std::vector<IouCounts>{{3, 7}}) == 3.0 / 7.0);
  out.emplace_back("overall_iou all perfect", overall_iou(std::vector<IouCounts>{{4, 4}, {9, 9}}) == 1.0);
  out.emplace_back("mean_iou [1,0]", mean_iou(std::vector<double>{1.0, 0.0}) == 0.5);
  out.emplace_back("mean_iou single", mean_iou(std::vector<double>{0.3}) == 0.3);
  out.emplace_back("mean_iou (1,2),(3,4)", mean_iou(two) == 0.625);
  out.emplace_back("prec@0.5 [0.55,0.75,0.45]", prec_at(std::vector<double>{0.55, 0.75, 0.45}, 0.5) == 2.0 / 3.0);
  out.emplace_back("prec@0.5 strict", prec_at(std::vector<double>{0.5}, 0.5) == 0.0);
  out.emplace_back("prec@0.9 all perfect", prec_at(std::vector<double>{1.0, 1.0}, 0.9) == 1.0);
  Rng rng(17);
  bool monotone = true;
  for (std::size_t t = 0; t < monotone_trials; ++t) {
    std::vector<double> ious(std::uniform_int_distribution<std::size_t>(1, 30)(rng));
    for (auto& v : ious) v = std::uniform_real_distribution<double>(0, 1)(rng);
    auto rep = make_report([&] {
      std::vector<IouCounts> c;
      for (double v : ious) {
        const auto u = std::uint64_t(1000);
        c.push_back({std::uint64_t(std::llround(v * double(u))), u});
      }
      return c;
    }());
    for (std::size_t i = 1; i < rep.prec.size(); ++i) monotone &= rep.prec[i] <= rep.prec[i - 1];
    double prev = 1.0;
    for (int x = 1; x < 100; ++x) {
      const double p = prec_at(ious, x / 100.0);
      monotone &= p <= prev;
      prev = p;
    }
  }
  out.emplace_back("prec@X non-increasing (random lists)", monotone);
  return out;
}

struct LossAnchors {
  double bce_half_error = 0;  // | bce(0.5) - ln 2 |
  double poly_at_max = 1;     // poly_lr(iter = max)
  double adam_step_error = 0; // | |first step| - lr |
};

inline LossAnchors loss_anchors() {
  LossAnchors a;
  for (int pattern = 0; pattern < 3; ++pattern) {
    std::vector<float> y(16);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pattern == 0 ? 0.0f : pattern == 1 ? 1.0f : float(i % 3 == 0);
    auto l = bce_loss(Tensor<float>::full({4, 4}, 0.5f), Tensor<float>({4, 4}, y));
    a.bce_half_error = std::max(a.bce_half_error, std::abs(double(l.item()) - std::log(2.0)));
  }
  a.poly_at_max = poly_lr(2.5e-4, 1000, 1000, 0.9);
  for (double lr : {2.5e-4, 1e-3, 0.1}) {
    Tensor<double> p({3}, {0.5, -1.0, 2.0}, true);
    std::vector<std::pair<std::string, Tensor<double>>> ps{{"p", p}};
    std::fill(p.mutable_grad().begin(), p.mutable_grad().end(), 1.0);
    AdamState<double> st;
    adam_step(ps, st, lr, 0.0);
    const std::vector<double> before{0.5, -1.0, 2.0};
    for (std::size_t i = 0; i < 3; ++i)
      a.adam_step_error = std::max(a.adam_step_error, std::abs(std::abs(p[i] - before[i]) - lr));
  }
  return a;
}

}  // namespace cmsa::testing
