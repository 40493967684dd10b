#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cmsa/attention.hpp"
#include "cmsa/encoder.hpp"
#include "cmsa/fusion.hpp"
#include "cmsa/language.hpp"
#include "cmsa/video.hpp"

namespace cmsa {

/// Architecture hyperparameters.
struct ModelConfig {
  std::size_t image_size = 64;
  EncoderConfig encoder{};
  std::size_t word_dim = 1000;   // C_l
  std::size_t max_words = 20;    // N_max
  std::size_t key_dim = 512;     // d_k of the cross-modal block
  std::size_t fusion_dim = 500;  // d_f
  std::size_t cfsa_key_dim = 512;
  std::size_t tau = 5;
  bool no_attention = false;
  bool scaled_attention = false;
  bool video_mode = false;

  std::size_t feature_dim(std::size_t level) const { return encoder.channels[level] + word_dim + 8; }
  std::size_t grid() const { return image_size / encoder.stride; }
};

template <class T>
struct ForwardResult {
  Tensor<T> probability;                     // [H_img x W_img]
  std::array<Tensor<T>, 3> word_attention;   // [N_max] per level
  Tensor<T> fused;                           // [d_f x H x W]
  Tensor<T> frame_weights;                   // [2*tau+1], video only
};

/// Complete referring-segmentation network: encoder, word embeddings,
/// one cross-modal block per level, gated fusion, mask head, and the
/// cross-frame block used in video mode.
template <class T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::size_t vocab_size, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.image_size == 0 || cfg.image_size % cfg.encoder.stride != 0)
      throw ConfigError("image_size must be a positive multiple of the stride");
    if (cfg.max_words == 0 || cfg.word_dim == 0 || cfg.key_dim == 0 || cfg.cfsa_key_dim == 0)
      throw ConfigError("model dimensions must be positive");
    if (vocab_size < 3) throw ConfigError("vocabulary must hold at least one real token");
    Rng rng(derive_seed(seed, 0xC0FFEE));
    encoder_ = VisualEncoder<T>(params_, cfg.encoder, rng);
    embedding_ = params_.add("embedding.weight", init_embedding_table<T>(vocab_size, cfg.word_dim, rng));
    for (std::size_t i = 0; i < 3; ++i)
      cmsa_[i] = make_cmsa_params(params_, "cmsa" + std::to_string(i + 1), cfg.feature_dim(i), cfg.key_dim, rng);
    fusion_ = make_fusion_params(params_, {cfg.feature_dim(0), cfg.feature_dim(1), cfg.feature_dim(2)},
                                 cfg.fusion_dim, rng);
    cfsa_ = make_cfsa_params(params_, "cfsa", cfg.encoder.channels[2], cfg.cfsa_key_dim, rng);
    coords_ = spatial_coords<T>(cfg.grid(), cfg.grid());
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const CmsaParams<T>& cmsa(std::size_t level) const { return cmsa_.at(level); }
  const CfsaParams<T>& cfsa() const { return cfsa_; }
  const FusionParams<T>& fusion() const { return fusion_; }
  const Tensor<T>& embedding() const { return embedding_; }

  /// Parameters that receive gradients under the current configuration.
  std::vector<std::pair<std::string, Tensor<T>>> trainable() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& [name, t] : params_.entries()) {
      if (cfg_.no_attention && name.rfind("cmsa", 0) == 0) continue;
      if (!cfg_.video_mode && name.rfind("cfsa", 0) == 0) continue;
      out.emplace_back(name, t);
    }
    return out;
  }

  LevelFeatures<T> encode(const Tensor<T>& image) const { return encoder_.encode(image); }

  /// Level-3 temporal update from the clip's level-3 maps; `center` is the
  /// target frame's position in the clip.
  Tensor<T> temporal_context(const std::vector<Tensor<T>>& clip_level3, std::size_t center,
                             Tensor<T>* frame_weights = nullptr) const {
    AttentionOptions opt{cfg_.scaled_attention};
    auto att = cfsa_attention(clip_level3, cfsa_, opt);
    const auto& f = clip_level3.at(center);
    auto pooled = frame_pool(att.out, att.scores, clip_level3.size(), f.dim(1), f.dim(2));
    if (frame_weights) *frame_weights = pooled.weights;
    return temporal_update(f, pooled.pooled);
  }

  /// Multimodal features, per-level attention, fusion and mask prediction.
  ForwardResult<T> head(const LevelFeatures<T>& feats, const TokenSequence& tokens, std::size_t out_h,
                        std::size_t out_w) const {
    if (tokens.max_len() != cfg_.max_words) throw InputError("token sequence length differs from max_words");
    auto words = embed(tokens, embedding_);
    ForwardResult<T> res;
    std::array<Tensor<T>, 3> x;
    std::array<Gates<T>, 3> gates;
    CmsaOptions opt;
    opt.attention.scaled = cfg_.scaled_attention;
    for (std::size_t i = 0; i < 3; ++i) {
      auto block = cfg_.no_attention ? mean_pooled_multimodal(feats.levels[i], words, coords_, tokens.mask)
                                     : cmsa_forward(feats.levels[i], words, coords_, tokens.mask, cmsa_[i], opt);
      res.word_attention[i] = block.word_attention;
      x[i] = project_level(block.pooled, fusion_.proj[i]);
      gates[i] = compute_gates(x[i], fusion_.memory_w[i], fusion_.memory_b[i], fusion_.reset_w[i], fusion_.reset_b[i]);
    }
    auto fused = gated_fuse(x, gates, fusion_.gamma);
    auto pred = predict_mask(fused, fusion_.pred_w, fusion_.pred_b, out_h, out_w);
    res.probability = pred.probability;
    res.fused = pred.fused;
    return res;
  }

  ForwardResult<T> forward(const Tensor<T>& image, const TokenSequence& tokens) const {
    return head(encode(image), tokens, image.dim(1), image.dim(2));
  }

  /// Video forward for one target: `clip` holds the 2*tau+1 frames around it
  /// (already clamped), the target sits in the middle.
  ForwardResult<T> forward_clip(const std::vector<Tensor<T>>& clip, const TokenSequence& tokens) const {
    if (clip.empty() || clip.size() % 2 == 0) throw InputError("clip must hold an odd number of frames");
    std::vector<LevelFeatures<T>> enc;
    for (const auto& f : clip) enc.push_back(encode(f));
    return forward_encoded_clip(enc, tokens, clip.front().dim(1), clip.front().dim(2));
  }

  ForwardResult<T> forward_encoded_clip(const std::vector<LevelFeatures<T>>& clip, const TokenSequence& tokens,
                                        std::size_t out_h, std::size_t out_w) const {
    const std::size_t center = clip.size() / 2;
    std::vector<Tensor<T>> level3;
    for (const auto& e : clip) level3.push_back(e.levels[2]);
    LevelFeatures<T> target = clip[center];
    Tensor<T> weights;
    target.levels[2] = temporal_context(level3, center, &weights);
    auto res = head(target, tokens, out_h, out_w);
    res.frame_weights = weights;
    return res;
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> params_;
  VisualEncoder<T> encoder_;
  Tensor<T> embedding_;
  std::array<CmsaParams<T>, 3> cmsa_;
  FusionParams<T> fusion_;
  CfsaParams<T> cfsa_;
  Tensor<T> coords_;
};

}  // namespace cmsa
