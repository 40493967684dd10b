#include <gtest/gtest.h>

#include "checks.hpp"
#include "cmsa/model.hpp"

namespace cmsa {
namespace {

using testing::TensorD;

TEST(ProjectLevel, DefaultWidthZeroKernelAndMatmul) {
  Rng rng(1);
  ParamStore<double> store;
  auto fp = make_fusion_params(store, {10, 12, 14}, 500, rng);
  auto pooled = uniform_tensor<double>({2, 3, 10}, -1, 1, rng);
  auto x = project_level(pooled, fp.proj[0]);
  EXPECT_EQ(x.shape(), (Shape{500, 2, 3}));
  const auto zero = project_level(pooled, TensorD::zeros({7, 10}));
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  auto k = uniform_tensor<double>({4, 10}, -1, 1, rng);
  auto y = project_level(pooled, k);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 6; ++p) {
      double s = 0;
      for (std::size_t j = 0; j < 10; ++j) s += k[c * 10 + j] * pooled[p * 10 + j];
      EXPECT_NEAR(y[c * 6 + p], s, 1e-14);
    }
  EXPECT_THROW(project_level(pooled, TensorD::zeros({4, 9})), DimensionError);
}

TEST(ComputeGates, Examples) {
  Rng rng(2);
  auto x = uniform_tensor<double>({3, 2, 2}, -5, 5, rng);
  auto g = compute_gates(x, TensorD::zeros({1, 3}), TensorD::zeros({1, 1}), TensorD::zeros({1, 3}), TensorD::zeros({1, 1}));
  for (double v : g.memory.data()) EXPECT_EQ(v, 0.5);
  for (double v : g.reset.data()) EXPECT_EQ(v, 0.5);
  auto r = compute_gates(x, uniform_tensor<double>({1, 3}, -9, 9, rng), TensorD({1, 1}, {3}),
                         uniform_tensor<double>({1, 3}, -9, 9, rng), TensorD({1, 1}, {-3}));
  for (double v : r.memory.data()) EXPECT_TRUE(v > 0 && v < 1);
  auto h = compute_gates(TensorD({2, 1, 1}, {1, 2}), TensorD({1, 2}, {0.5, -1}), TensorD({1, 1}, {0.25}),
                         TensorD({1, 2}, {1, 1}), TensorD({1, 1}, {0}));
  EXPECT_NEAR(h.memory[0], 1 / (1 + std::exp(1.25)), 1e-15);
  EXPECT_NEAR(h.reset[0], 1 / (1 + std::exp(-3.0)), 1e-15);
  EXPECT_EQ(h.memory.shape(), (Shape{1, 1, 1}));
}

TEST(GatedFuse, BypassIdentitiesAreExact) {
  const auto r = testing::fusion_identities();
  EXPECT_TRUE(r.bypass);
  EXPECT_TRUE(r.tanh_path);
}

TEST(GatedFuse, HandEvaluationOnOnePixel) {
  std::array<TensorD, 3> x{TensorD({2, 1, 1}, {1, -1}), TensorD({2, 1, 1}, {0.5, 2}), TensorD({2, 1, 1}, {-0.3, 0.7})};
  std::array<double, 3> m{0.2, 0.6, 0.9}, r{0.3, 0.5, 0.8};
  std::array<Gates<double>, 3> g;
  for (std::size_t i = 0; i < 3; ++i) g[i] = {TensorD({1, 1, 1}, {m[i]}), TensorD({1, 1, 1}, {r[i]})};
  TensorD gamma({3}, {1.5, -0.5, 0.25});
  auto out = gated_fuse(x, g, gamma);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 2; ++c) {
      double gi = (1 - m[i]) * x[i][c];
      for (std::size_t j = 0; j < 3; ++j)
        if (j != i) gi += gamma[j] * m[j] * x[j][c];
      EXPECT_NEAR(out[i][c], r[i] * std::tanh(gi) + (1 - r[i]) * x[i][c], 1e-15);
    }
}

TEST(GatedFuse, GateBroadcastMatchesTiledGate) {
  Rng rng(3);
  std::array<TensorD, 3> x;
  for (auto& xi : x) xi = uniform_tensor<double>({4, 2, 3}, -1, 1, rng);
  std::array<Gates<double>, 3> g, tiled;
  for (std::size_t i = 0; i < 3; ++i) {
    g[i] = {uniform_tensor<double>({1, 2, 3}, 0, 1, rng), uniform_tensor<double>({1, 2, 3}, 0, 1, rng)};
    tiled[i] = {concat<double>({g[i].memory, g[i].memory, g[i].memory, g[i].memory}, 0),
                concat<double>({g[i].reset, g[i].reset, g[i].reset, g[i].reset}, 0)};
  }
  TensorD gamma({3}, {0.7, 1.1, -0.2});
  auto a = gated_fuse(x, g, gamma), b = gated_fuse(x, tiled, gamma);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(testing::as_double(a[i]), testing::as_double(b[i]));
}

TEST(PredictMask, Examples) {
  Rng rng(4);
  std::array<TensorD, 3> f;
  for (auto& fi : f) fi = uniform_tensor<double>({3, 2, 2}, -1, 1, rng);
  auto p = predict_mask(f, TensorD::zeros({1, 3, 3, 3}), TensorD::zeros({1, 1, 1}), 16, 16);
  EXPECT_EQ(p.probability.shape(), (Shape{16, 16}));
  for (double v : p.probability.data()) EXPECT_EQ(v, 0.5);
  auto c = upsample_bilinear(TensorD::full({1, 2, 3}, 0.37), 8, 12);
  for (double v : c.data()) EXPECT_NEAR(v, 0.37, 1e-15);
  auto q = predict_mask(f, uniform_tensor<double>({1, 3, 3, 3}, -3, 3, rng), TensorD({1, 1, 1}, {1}), 16, 16);
  for (double v : q.probability.data()) EXPECT_TRUE(v > 0 && v < 1);
}

TEST(Binarize, Examples) {
  for (std::uint8_t v : binarize(TensorD::full({2, 2}, 0.5)).pixels) EXPECT_EQ(v, 1);
  for (std::uint8_t v : binarize(TensorD::full({2, 2}, 0.49)).pixels) EXPECT_EQ(v, 0);
  auto m = binarize(TensorD({2, 2}, {0.1, 0.7, 0.5, 0.4999}));
  EXPECT_EQ(m.pixels, (std::vector<std::uint8_t>{0, 1, 1, 0}));
  EXPECT_EQ(m.count(), 2u);
  EXPECT_THROW(binarize(TensorD::full({2, 2}, 0.5), 1.0), UsageError);
}

TEST(FusionGradient, EveryFusionParameterOnFourByFour) {
  const auto cases = testing::gradient_cases();
  for (const auto& [name, fn] : cases)
    if (name == "fusion head + loss")
      for (std::uint64_t s = 0; s < 5; ++s) {
        Rng rng(s);
        EXPECT_LT(fn(rng).max_rel_error, 1e-3);
      }
}

TEST(ExtractClip, Examples) {
  EXPECT_EQ(extract_clip(3, 0, 2), (std::vector<std::size_t>{0, 0, 0, 1, 2}));
  EXPECT_EQ(extract_clip(7, 4, 0), (std::vector<std::size_t>{4}));
  EXPECT_EQ(extract_clip(7, 4, 1), (std::vector<std::size_t>{3, 4, 5}));
  EXPECT_EQ(extract_clip(4, 3, 2), (std::vector<std::size_t>{1, 2, 3, 3, 3}));
  EXPECT_EQ(extract_clip(12, 5, 5).size(), 11u);
  EXPECT_THROW(extract_clip(0, 0, 1), InputError);
  EXPECT_THROW(extract_clip(3, 3, 1), InputError);
}

CfsaParams<double> random_cfsa(std::size_t c, std::size_t dk, Rng& rng) {
  return {uniform_tensor<double>({dk, c}, -1, 1, rng), uniform_tensor<double>({dk, c}, -1, 1, rng),
          uniform_tensor<double>({c, c}, -1, 1, rng)};
}

TEST(CfsaAttention, SingleFrameIsSpatialSelfAttention) {
  Rng rng(5);
  auto f = uniform_tensor<double>({3, 2, 2}, -1, 1, rng);
  auto prm = random_cfsa(3, 2, rng);
  auto res = cfsa_attention<double>({f}, prm);
  auto x = transpose(reshape(f, {3, 4}));
  auto ref = attention(matmul(x, prm.w_q, false, true), matmul(x, prm.w_k, false, true), matmul(x, prm.w_v, false, true));
  EXPECT_EQ(testing::as_double(res.out), testing::as_double(ref.out));
}

TEST(CfsaAttention, IdenticalFramesGiveIdenticalOutputs) {
  Rng rng(6);
  auto f = uniform_tensor<double>({3, 2, 2}, -1, 1, rng);
  auto prm = random_cfsa(3, 4, rng);
  auto res = cfsa_attention<double>({f, f, f}, prm);
  for (std::size_t t = 1; t < 3; ++t)
    for (std::size_t i = 0; i < 4 * 3; ++i) EXPECT_NEAR(res.out[t * 12 + i], res.out[i], 1e-14);
}

TEST(CfsaAttention, TwoFrameToyMatchesOracle) {
  Rng rng(7);
  std::vector<TensorD> clip{uniform_tensor<double>({2, 1, 1}, -1, 1, rng), uniform_tensor<double>({2, 1, 1}, -1, 1, rng)};
  auto prm = random_cfsa(2, 2, rng);
  auto res = cfsa_attention(clip, prm);
  std::vector<double> q(4), k(4), v(4);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 2; ++i) {
      q[t * 2 + i] = prm.w_q[i * 2] * clip[t][0] + prm.w_q[i * 2 + 1] * clip[t][1];
      k[t * 2 + i] = prm.w_k[i * 2] * clip[t][0] + prm.w_k[i * 2 + 1] * clip[t][1];
      v[t * 2 + i] = prm.w_v[i * 2] * clip[t][0] + prm.w_v[i * 2 + 1] * clip[t][1];
    }
  auto ref = testing::attention_oracle(q, k, v, 2, 1, 2, 2, {});
  EXPECT_LT(testing::max_abs_diff(testing::as_double(res.out), ref.out), 1e-12);
}

TEST(FramePool, Examples) {
  Rng rng(8);
  auto att1 = cfsa_attention<double>({uniform_tensor<double>({3, 2, 2}, -1, 1, rng)}, random_cfsa(3, 2, rng));
  auto p1 = frame_pool(att1.out, att1.scores, 1, 2, 2);
  EXPECT_EQ(testing::as_double(p1.weights), (std::vector<double>{1.0}));
  EXPECT_EQ(testing::as_double(p1.pooled), testing::as_double(reshape(transpose(att1.out), {3, 2, 2})));
  const std::size_t m = 3 * 4;
  auto uniform = TensorD::full({m, m}, 1.0 / double(m));
  auto p3 = frame_pool(uniform_tensor<double>({m, 2}, -1, 1, rng), uniform, 3, 2, 2);
  for (double w : p3.weights.data()) EXPECT_NEAR(w, 1.0 / 3, 1e-15);
  auto att = cfsa_attention<double>({uniform_tensor<double>({3, 2, 2}, -1, 1, rng), uniform_tensor<double>({3, 2, 2}, -1, 1, rng),
                                     uniform_tensor<double>({3, 2, 2}, -1, 1, rng)},
                                    random_cfsa(3, 2, rng));
  auto p = frame_pool(att.out, att.scores, 3, 2, 2);
  EXPECT_NEAR(sum(p.weights).item(), 1.0, 1e-6);
  for (double w : p.weights.data()) EXPECT_GE(w, 0.0);
}

TEST(TemporalUpdate, Examples) {
  TensorD v({2, 1, 1}, {1.5, -2});
  EXPECT_EQ(testing::as_double(temporal_update(v, TensorD::zeros({2, 1, 1}))), testing::as_double(v));
  EXPECT_EQ(testing::as_double(temporal_update(v, TensorD({2, 1, 1}, {0.5, 3}))), (std::vector<double>{2, 1}));
  EXPECT_THROW(temporal_update(v, TensorD::zeros({1, 1, 1})), DimensionError);
}

TEST(TemporalUpdate, GradientReachesEveryClipFrame) {
  Rng rng(9);
  auto prm = random_cfsa(2, 2, rng);
  std::vector<TensorD> clip;
  for (int t = 0; t < 3; ++t) clip.push_back(uniform_tensor<double>({2, 2, 2}, -1, 1, rng));
  const auto pseed = rng();
  auto f = [&](const std::vector<TensorD>& x) {
    auto att = cfsa_attention(x, prm);
    auto pooled = frame_pool(att.out, att.scores, 3, 2, 2);
    Rng r(pseed);
    return testing::probe(temporal_update(x[1], pooled.pooled), r);
  };
  EXPECT_LT(testing::gradcheck(f, clip).max_rel_error, 1e-3);
  for (auto& c : clip) c.set_requires_grad(true);
  backward(f(clip));
  for (const auto& c : clip) {
    double mag = 0;
    for (double g : c.grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0);
  }
}

ModelConfig tiny_model(bool video) {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.encoder.channels = {4, 6, 8};
  cfg.word_dim = 6;
  cfg.max_words = 4;
  cfg.key_dim = 5;
  cfg.fusion_dim = 7;
  cfg.cfsa_key_dim = 3;
  cfg.tau = 0;
  cfg.video_mode = video;
  return cfg;
}

TEST(VideoModel, TauZeroWithZeroValueProjectionMatchesImagePipeline) {
  Vocabulary vocab({"red", "circle"});
  Model<float> model(tiny_model(true), vocab.size(), 3);
  auto& wv = model.params().get("cfsa.w_v");
  std::fill(wv.mutable_data().begin(), wv.mutable_data().end(), 0.0f);
  Rng rng(10);
  auto img = uniform_tensor<float>({3, 16, 16}, 0, 1, rng);
  auto tokens = tokenize("red circle", vocab, 4);
  NoGradGuard ng;
  auto video = model.forward_clip({img}, tokens);
  auto image = model.forward(img, tokens);
  double diff = 0;
  for (std::size_t i = 0; i < image.probability.numel(); ++i)
    diff = std::max(diff, double(std::abs(video.probability[i] - image.probability[i])));
  EXPECT_LT(diff, 1e-5);
  EXPECT_EQ(testing::as_double(video.frame_weights), (std::vector<double>{1.0}));
}

TEST(VideoModel, ClipMustHaveOddLength) {
  Vocabulary vocab({"red"});
  Model<float> model(tiny_model(true), vocab.size(), 3);
  auto img = Tensor<float>::zeros({3, 16, 16});
  EXPECT_THROW(model.forward_clip({img, img}, tokenize("red", vocab, 4)), InputError);
}

TEST(VideoModel, DeterministicUnderFixedSeed) {
  Vocabulary vocab({"red", "circle"});
  auto cfg = tiny_model(true);
  cfg.tau = 1;
  Model<float> a(cfg, vocab.size(), 5), b(cfg, vocab.size(), 5);
  Rng rng(11);
  std::vector<Tensor<float>> clip;
  for (int t = 0; t < 3; ++t) clip.push_back(uniform_tensor<float>({3, 16, 16}, 0, 1, rng));
  auto tokens = tokenize("circle", vocab, 4);
  EXPECT_EQ(testing::as_double(a.forward_clip(clip, tokens).probability),
            testing::as_double(b.forward_clip(clip, tokens).probability));
}

}  // namespace
}  // namespace cmsa
