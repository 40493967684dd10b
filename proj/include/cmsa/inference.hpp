#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "cmsa/train.hpp"

namespace cmsa {

/// Tokenizes for inference; an expression without any known word is rejected.
inline TokenSequence inference_tokens(const std::string& expression, const Vocabulary& vocab, std::size_t max_words) {
  auto tokens = tokenize(expression, vocab, max_words);
  bool known = false;
  for (std::size_t i = 0; i < tokens.n_real; ++i) known |= tokens.indices[i] != kUnkIndex;
  if (!known) throw InputError("expression '" + expression + "' contains no known word");
  return tokens;
}

/// Reads a single .ppm or every .ppm of a directory (sorted by name).
inline std::vector<Image8> read_frames(const std::filesystem::path& input) {
  std::vector<Image8> frames;
  if (std::filesystem::is_directory(input)) {
    for (const auto& p : sorted_files(input, ".ppm")) frames.push_back(read_ppm(p));
    if (frames.empty()) throw InputError("no .ppm frames in " + input.string());
  } else {
    frames.push_back(read_ppm(input));
  }
  return frames;
}

inline Image8 probability_heatmap(const Tensor<float>& p) {
  std::vector<std::uint8_t> px(p.numel());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::uint8_t(std::lround(255.0 * std::clamp(double(p[i]), 0.0, 1.0)));
  return gray_image(p.dim(0), p.dim(1), std::move(px));
}

inline Image8 mask_image(const BinaryMask& m) {
  std::vector<std::uint8_t> px(m.pixels.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = m.pixels[i] ? 255 : 0;
  return gray_image(m.height, m.width, std::move(px));
}

struct InferOutput {
  std::vector<BinaryMask> masks;            // one per frame
  std::vector<Tensor<float>> probabilities;
};

/// Segments every input frame. One image writes `out` as a PGM mask; a frame
/// directory writes out/frame_<t>.pgm per frame. Heatmaps hold round(255 P).
/// Video models see the clamped 2*tau+1 clip around each frame.
inline InferOutput infer(const LoadedModel& lm, const std::filesystem::path& input, const std::string& expression,
                         const std::optional<std::filesystem::path>& out = std::nullopt,
                         const std::optional<std::filesystem::path>& heatmap = std::nullopt) {
  const auto& cfg = lm.config.model;
  Item item;
  item.id = input.stem().string();
  item.tokens = inference_tokens(expression, lm.vocab, cfg.max_words);
  const auto frames = read_frames(input);
  for (const auto& f : frames) {
    if (f.height % cfg.encoder.stride || f.width % cfg.encoder.stride)
      throw InputError("input " + std::to_string(f.width) + "x" + std::to_string(f.height) +
                       " is not a multiple of the output stride " + std::to_string(cfg.encoder.stride));
    item.frames.push_back(image_tensor<float>(f));
  }
  FlushDenormalsGuard ftz;
  NoGradGuard guard;
  InferOutput res;
  res.probabilities = predict_item(lm.model, item);
  for (const auto& p : res.probabilities) res.masks.push_back(binarize(p));
  const bool many = std::filesystem::is_directory(input);
  auto write_all = [&](const std::filesystem::path& dst, bool probs) {
    if (many) std::filesystem::create_directories(dst);
    for (std::size_t t = 0; t < res.masks.size(); ++t) {
      const auto path = many ? dst / detail::frame_name(t, ".pgm") : dst;
      write_pgm(path, probs ? probability_heatmap(res.probabilities[t]) : mask_image(res.masks[t]));
    }
  };
  if (out) write_all(*out, false);
  if (heatmap) write_all(*heatmap, true);
  return res;
}

struct AttentionViz {
  std::vector<std::string> words;  // the N_real tokens
  Tensor<float> matrix;            // [3 x N_real], rows sum to 1
  Image8 heatmap;                  // strongest fused channel, min-max scaled to 0..255
};

/// Per-level word attention and a spatial map of the fused feature channel
/// with the largest mean activation, upsampled to the input size. For a frame
/// directory, `frame` selects the target frame.
inline AttentionViz viz_attention(const LoadedModel& lm, const std::filesystem::path& input, const std::string& expression,
                                  std::size_t frame = 0) {
  const auto& cfg = lm.config.model;
  const auto tokens = inference_tokens(expression, lm.vocab, cfg.max_words);
  const auto frames = read_frames(input);
  if (frame >= frames.size()) throw InputError("frame index " + std::to_string(frame) + " outside the input");
  FlushDenormalsGuard ftz;
  NoGradGuard guard;
  ForwardResult<float> fr;
  if (cfg.video_mode) {
    std::vector<Tensor<float>> clip;
    for (auto f : extract_clip(frames.size(), frame, cfg.tau)) clip.push_back(image_tensor<float>(frames[f]));
    fr = lm.model.forward_clip(clip, tokens);
  } else {
    fr = lm.model.forward(image_tensor<float>(frames[frame]), tokens);
  }
  AttentionViz viz;
  auto words = split_words(expression);
  words.resize(tokens.n_real);
  viz.words = words;
  viz.matrix = word_attention_matrix<float>({fr.word_attention[0], fr.word_attention[1], fr.word_attention[2]}, tokens.n_real);

  const auto& fused = fr.fused;  // [d_f x h x w]
  const std::size_t c = fused.dim(0), hw = fused.dim(1) * fused.dim(2);
  std::size_t best = 0;
  double best_mean = -INFINITY;
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += fused[k * hw + i];
    if (s / double(hw) > best_mean) {
      best_mean = s / double(hw);
      best = k;
    }
  }
  const auto up = upsample_bilinear(slice(fused, 0, best, 1), frames[frame].height, frames[frame].width);
  const auto [lo, hi] = std::minmax_element(up.data().begin(), up.data().end());
  const double range = double(*hi) - double(*lo);
  std::vector<std::uint8_t> px(up.numel(), 0);
  if (range > 0)
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::uint8_t(std::lround(255.0 * (double(up[i]) - *lo) / range));
  viz.heatmap = gray_image(frames[frame].height, frames[frame].width, std::move(px));
  return viz;
}

/// Writes attention.csv and heatmap.pgm into `dir`.
inline void write_attention_viz(const std::filesystem::path& dir, const AttentionViz& viz) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "attention.csv", std::ios::binary);
  if (!csv) throw IoError("cannot write " + (dir / "attention.csv").string());
  write_word_attention_csv(csv, viz.matrix, viz.words);
  write_pgm(dir / "heatmap.pgm", viz.heatmap);
}

}  // namespace cmsa
