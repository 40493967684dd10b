#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cmsa/dataset.hpp"
#include "cmsa/language.hpp"
#include "cmsa/rng.hpp"
#include "cmsa/synth.hpp"

namespace cmsa {

/// Label-preserving transform of a synthetic sample: a translation that keeps
/// every shape on the canvas, an optional vertical flip and a relabeling of
/// the shape palette.
struct Augmentation {
  std::ptrdiff_t dx = 0, dy = 0;
  bool flip = false;
  std::array<std::size_t, 4> colors{0, 1, 2, 3};  // palette entry c is drawn as colors[c]

  bool identity() const { return dx == 0 && dy == 0 && !flip && colors == std::array<std::size_t, 4>{0, 1, 2, 3}; }
};

/// Bounding box of the non-background pixels over all frames, as
/// {min_x, min_y, max_x, max_y}; empty frames give the whole canvas.
inline std::array<std::size_t, 4> content_box(const LoadedSample& s) {
  const auto& bg = synth::kBackgroundRgb;
  const auto& f0 = s.frames.at(0);
  std::array<std::size_t, 4> box{f0.width, f0.height, 0, 0};
  for (const auto& f : s.frames)
    for (std::size_t y = 0; y < f.height; ++y)
      for (std::size_t x = 0; x < f.width; ++x) {
        const auto* px = &f.pixels[(y * f.width + x) * 3];
        if (px[0] == bg[0] && px[1] == bg[1] && px[2] == bg[2]) continue;
        box = {std::min(box[0], x), std::min(box[1], y), std::max(box[2], x), std::max(box[3], y)};
      }
  if (box[0] > box[2]) return {0, 0, f0.width - 1, f0.height - 1};
  return box;
}

inline Augmentation draw_augmentation(const LoadedSample& s, std::uint64_t seed) {
  Rng rng(seed);
  Augmentation a;
  const auto box = content_box(s);
  const auto& f = s.frames.at(0);
  a.dx = std::uniform_int_distribution<std::ptrdiff_t>(-std::ptrdiff_t(box[0]),
                                                       std::ptrdiff_t(f.width - 1 - box[2]))(rng);
  a.dy = std::uniform_int_distribution<std::ptrdiff_t>(-std::ptrdiff_t(box[1]),
                                                       std::ptrdiff_t(f.height - 1 - box[3]))(rng);
  a.flip = std::bernoulli_distribution(0.5)(rng);
  std::shuffle(a.colors.begin(), a.colors.end(), rng);
  return a;
}

namespace detail {

template <class Px>
void flip_rows(std::vector<Px>& px, std::size_t height, std::size_t row_len) {
  for (std::size_t y = 0; y < height / 2; ++y)
    std::swap_ranges(px.begin() + std::ptrdiff_t(y * row_len), px.begin() + std::ptrdiff_t((y + 1) * row_len),
                     px.begin() + std::ptrdiff_t((height - 1 - y) * row_len));
}

/// Moves every pixel by (dx, dy); vacated pixels take `fill`.
template <class Px>
std::vector<Px> shifted(const std::vector<Px>& px, std::size_t width, std::size_t height, std::size_t channels,
                        std::ptrdiff_t dx, std::ptrdiff_t dy, const Px* fill) {
  std::vector<Px> out(px.size());
  for (std::size_t p = 0; p < width * height; ++p) std::copy(fill, fill + channels, out.begin() + std::ptrdiff_t(p * channels));
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const auto tx = std::ptrdiff_t(x) + dx, ty = std::ptrdiff_t(y) + dy;
      if (tx < 0 || ty < 0 || tx >= std::ptrdiff_t(width) || ty >= std::ptrdiff_t(height)) continue;
      std::copy_n(px.begin() + std::ptrdiff_t((y * width + x) * channels), channels,
                  out.begin() + std::ptrdiff_t((std::size_t(ty) * width + std::size_t(tx)) * channels));
    }
  return out;
}

}  // namespace detail

/// Pixels equal to a palette colour are repainted; the background and any
/// other value pass through.
inline void recolor(Image8& img, const std::array<std::size_t, 4>& colors) {
  if (img.channels != 3) throw DimensionError("recolor: expected an RGB image");
  const auto& pal = synth::kColorRgb;
  for (std::size_t p = 0; p < img.width * img.height; ++p) {
    auto* px = &img.pixels[p * 3];
    for (std::size_t c = 0; c < pal.size(); ++c)
      if (px[0] == pal[c][0] && px[1] == pal[c][1] && px[2] == pal[c][2]) {
        std::copy(pal[colors[c]].begin(), pal[colors[c]].end(), px);
        break;
      }
  }
}

/// Swaps colour words the same way the palette is swapped.
inline std::string recolor_expression(const std::string& expression, const std::array<std::size_t, 4>& colors) {
  std::string out;
  for (const auto& w : split_words(expression)) {
    std::string word = w;
    for (std::size_t c = 0; c < synth::kColorNames.size(); ++c)
      if (w == synth::kColorNames[c]) word = synth::kColorNames[colors[c]];
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

inline LoadedSample augment(LoadedSample s, const Augmentation& a) {
  if (a.identity()) return s;
  s.expression = recolor_expression(s.expression, a.colors);
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    auto& f = s.frames[t];
    recolor(f, a.colors);
    if (a.dx != 0 || a.dy != 0) {
      const std::uint8_t off = 0;
      f.pixels = detail::shifted(f.pixels, f.width, f.height, 3, a.dx, a.dy, synth::kBackgroundRgb.data());
      s.masks[t] = detail::shifted(s.masks[t], f.width, f.height, 1, a.dx, a.dy, &off);
    }
    if (a.flip) {
      detail::flip_rows(f.pixels, f.height, f.width * f.channels);
      detail::flip_rows(s.masks[t], f.height, f.width);
    }
  }
  return s;
}

}  // namespace cmsa
