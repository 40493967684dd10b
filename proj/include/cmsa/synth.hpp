#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cmsa/error.hpp"
#include "cmsa/rng.hpp"

namespace cmsa::synth {

enum class ShapeKind : std::uint8_t { circle, square, triangle };
enum class Color : std::uint8_t { red, green, blue, yellow };
enum class SizeClass : std::uint8_t { small, large };

inline constexpr std::array<const char*, 3> kKindNames{"circle", "square", "triangle"};
inline constexpr std::array<const char*, 4> kColorNames{"red", "green", "blue", "yellow"};
inline constexpr std::array<const char*, 2> kSizeNames{"small", "large"};
inline constexpr std::array<std::array<std::uint8_t, 3>, 4> kColorRgb{{{220, 40, 40}, {40, 190, 60}, {50, 80, 230}, {230, 210, 40}}};
inline constexpr std::array<std::uint8_t, 3> kBackgroundRgb{24, 24, 24};

inline const char* name(ShapeKind k) { return kKindNames[std::size_t(k)]; }
inline const char* name(Color c) { return kColorNames[std::size_t(c)]; }
inline const char* name(SizeClass s) { return kSizeNames[std::size_t(s)]; }

/// Every word the expression templates can emit.
inline std::vector<std::string> template_vocabulary() {
  std::vector<std::string> v;
  for (auto c : kColorNames) v.emplace_back(c);
  for (auto k : kKindNames) v.emplace_back(k);
  for (auto s : kSizeNames) v.emplace_back(s);
  for (auto w : {"left", "of", "leftmost", "on", "the", "right"}) v.emplace_back(w);
  return v;
}

struct ShapeSpec {
  ShapeKind kind{};
  Color color{};
  SizeClass size{};
  double cx = 0, cy = 0;  // centre in pixel coordinates
  double extent = 0;      // radius / half side

  double left() const { return cx - extent; }
  double right() const { return cx + extent; }
  double top() const { return cy - extent; }
  double bottom() const { return cy + extent; }

  /// Exact membership test for the pixel whose centre is (px, py).
  bool contains(double px, double py) const {
    switch (kind) {
      case ShapeKind::circle:
        return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= extent * extent;
      case ShapeKind::square:
        return std::abs(px - cx) <= extent && std::abs(py - cy) <= extent;
      case ShapeKind::triangle:  // apex up, base along the bottom edge
        return py >= cy - extent && py <= cy + extent && std::abs(px - cx) <= (py - cy + extent) / 2.0;
    }
    return false;
  }
};

struct SceneSpec {
  std::size_t width = 64, height = 64;
  std::vector<ShapeSpec> shapes;
  std::uint64_t seed = 0;
};

inline bool operator==(const ShapeSpec& a, const ShapeSpec& b) {
  return a.kind == b.kind && a.color == b.color && a.size == b.size && a.cx == b.cx && a.cy == b.cy &&
         a.extent == b.extent;
}
inline bool operator==(const SceneSpec& a, const SceneSpec& b) {
  return a.width == b.width && a.height == b.height && a.shapes == b.shapes && a.seed == b.seed;
}

struct SynthConfig {
  std::size_t canvas = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  std::array<double, 2> small_extent{7.0, 9.0};
  std::array<double, 2> large_extent{12.0, 15.0};
  std::size_t max_attempts = 1000;
  // video
  std::size_t frames = 12;
  std::array<double, 2> speed{0.5, 2.0};  // pixels per frame
};

/// Bounding boxes (with a one pixel gap) do not intersect.
inline bool boxes_disjoint(const ShapeSpec& a, const ShapeSpec& b, double gap = 1.0) {
  return a.right() + gap <= b.left() || b.right() + gap <= a.left() || a.bottom() + gap <= b.top() ||
         b.bottom() + gap <= a.top();
}

/// Samples 1..max shapes with random attributes and rejection-sampled
/// placements; deterministic in the seed.
inline SceneSpec gen_scene(std::uint64_t seed, const SynthConfig& cfg) {
  if (cfg.min_shapes < 1 || cfg.max_shapes > 4 || cfg.min_shapes > cfg.max_shapes)
    throw GenerationError("shape count range must lie within 1..4");
  Rng rng(seed);
  SceneSpec scene;
  scene.width = scene.height = cfg.canvas;
  scene.seed = seed;
  const std::size_t count = std::uniform_int_distribution<std::size_t>(cfg.min_shapes, cfg.max_shapes)(rng);
  std::size_t attempts = 0;
  for (std::size_t i = 0; i < count; ++i) {
    ShapeSpec s;
    s.kind = ShapeKind(std::uniform_int_distribution<int>(0, 2)(rng));
    s.color = Color(std::uniform_int_distribution<int>(0, 3)(rng));
    s.size = SizeClass(std::uniform_int_distribution<int>(0, 1)(rng));
    const auto& range = s.size == SizeClass::small ? cfg.small_extent : cfg.large_extent;
    s.extent = std::round(std::uniform_real_distribution<double>(range[0], range[1])(rng));
    const double lo = s.extent + 1, hi = double(cfg.canvas) - s.extent - 1;
    if (hi < lo) throw GenerationError("shape does not fit the canvas");
    for (;;) {
      if (++attempts > cfg.max_attempts)
        throw GenerationError("could not place " + std::to_string(count) + " shapes after " +
                              std::to_string(cfg.max_attempts) + " attempts");
      s.cx = std::round(std::uniform_real_distribution<double>(lo, hi)(rng));
      s.cy = std::round(std::uniform_real_distribution<double>(lo, hi)(rng));
      if (std::all_of(scene.shapes.begin(), scene.shapes.end(), [&](const ShapeSpec& o) { return boxes_disjoint(s, o); }))
        break;
    }
    scene.shapes.push_back(s);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// Rendering

struct RenderedScene {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;                 // height * width * 3
  std::vector<std::vector<std::uint8_t>> masks;  // per shape, values 0 / 255
};

inline RenderedScene render(const SceneSpec& scene) {
  RenderedScene out;
  out.width = scene.width;
  out.height = scene.height;
  out.rgb.resize(scene.width * scene.height * 3);
  for (std::size_t i = 0; i < scene.width * scene.height; ++i)
    std::copy(kBackgroundRgb.begin(), kBackgroundRgb.end(), out.rgb.begin() + std::ptrdiff_t(i * 3));
  for (const auto& s : scene.shapes) {
    std::vector<std::uint8_t> mask(scene.width * scene.height, 0);
    const auto& rgb = kColorRgb[std::size_t(s.color)];
    for (std::size_t y = 0; y < scene.height; ++y)
      for (std::size_t x = 0; x < scene.width; ++x)
        if (s.contains(double(x) + 0.5, double(y) + 0.5)) {
          mask[y * scene.width + x] = 255;
          std::copy(rgb.begin(), rgb.end(), out.rgb.begin() + std::ptrdiff_t((y * scene.width + x) * 3));
        }
    out.masks.push_back(std::move(mask));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Referring expressions

enum class Template : std::uint8_t { color_shape, size_color_shape, left_of, leftmost, on_the_right };

struct Expression {
  Template form{};
  ShapeKind kind{};
  Color color{};
  SizeClass size{};
  ShapeKind anchor_kind{};
  Color anchor_color{};

  std::string text() const {
    std::ostringstream os;
    switch (form) {
      case Template::color_shape: os << name(color) << ' ' << name(kind); break;
      case Template::size_color_shape: os << name(size) << ' ' << name(color) << ' ' << name(kind); break;
      case Template::left_of: os << name(kind) << " left of " << name(anchor_color) << ' ' << name(anchor_kind); break;
      case Template::leftmost: os << "leftmost " << name(kind); break;
      case Template::on_the_right: os << name(color) << ' ' << name(kind) << " on the right"; break;
    }
    return os.str();
  }
};

/// Horizontal separation needed before "left of" / "leftmost" / "on the right" apply.
inline constexpr double kOrderGap = 2.0;

/// Indices of the shapes an expression describes.
inline std::vector<std::size_t> resolve(const SceneSpec& scene, const Expression& e) {
  const auto& sh = scene.shapes;
  std::vector<std::size_t> hits;
  auto select = [&](auto pred) {
    std::vector<std::size_t> r;
    for (std::size_t i = 0; i < sh.size(); ++i)
      if (pred(sh[i])) r.push_back(i);
    return r;
  };
  // Extreme element by cx; ties within kOrderGap make the phrase ambiguous.
  auto extreme = [&](std::vector<std::size_t> cand, bool leftmost) {
    if (cand.empty()) return cand;
    std::sort(cand.begin(), cand.end(), [&](auto a, auto b) { return leftmost ? sh[a].cx < sh[b].cx : sh[a].cx > sh[b].cx; });
    std::vector<std::size_t> r{cand[0]};
    for (std::size_t i = 1; i < cand.size(); ++i)
      if (std::abs(sh[cand[i]].cx - sh[cand[0]].cx) < kOrderGap) r.push_back(cand[i]);
    return r;
  };
  switch (e.form) {
    case Template::color_shape:
      return select([&](const ShapeSpec& s) { return s.color == e.color && s.kind == e.kind; });
    case Template::size_color_shape:
      return select([&](const ShapeSpec& s) { return s.size == e.size && s.color == e.color && s.kind == e.kind; });
    case Template::left_of: {
      auto anchors = select([&](const ShapeSpec& s) { return s.color == e.anchor_color && s.kind == e.anchor_kind; });
      if (anchors.size() != 1) return {};
      const auto& a = sh[anchors[0]];
      std::vector<std::size_t> r;
      for (std::size_t i = 0; i < sh.size(); ++i)
        if (i != anchors[0] && sh[i].kind == e.kind && sh[i].cx < a.cx - kOrderGap) r.push_back(i);
      return r;
    }
    case Template::leftmost:
      return extreme(select([&](const ShapeSpec& s) { return s.kind == e.kind; }), true);
    case Template::on_the_right:
      return extreme(select([&](const ShapeSpec& s) { return s.color == e.color && s.kind == e.kind; }), false);
  }
  return hits;
}

/// Every template instance built from the referent's attributes (and, for
/// "left of", each other shape as anchor) that resolves to the referent alone.
inline std::vector<Expression> unique_expressions(const SceneSpec& scene, std::size_t referent) {
  if (referent >= scene.shapes.size()) throw GenerationError("referent index out of range");
  const auto& r = scene.shapes[referent];
  std::vector<Expression> cand;
  cand.push_back({Template::color_shape, r.kind, r.color, r.size, {}, {}});
  cand.push_back({Template::size_color_shape, r.kind, r.color, r.size, {}, {}});
  for (std::size_t j = 0; j < scene.shapes.size(); ++j)
    if (j != referent)
      cand.push_back({Template::left_of, r.kind, r.color, r.size, scene.shapes[j].kind, scene.shapes[j].color});
  cand.push_back({Template::leftmost, r.kind, r.color, r.size, {}, {}});
  cand.push_back({Template::on_the_right, r.kind, r.color, r.size, {}, {}});
  std::vector<Expression> ok;
  for (const auto& e : cand) {
    auto hits = resolve(scene, e);
    if (hits.size() == 1 && hits[0] == referent) ok.push_back(e);
  }
  return ok;
}

/// Picks uniformly among the unambiguous expressions for the referent.
inline Expression gen_expression(const SceneSpec& scene, std::size_t referent, std::uint64_t seed) {
  auto ok = unique_expressions(scene, referent);
  if (ok.empty()) throw GenerationError("no template describes shape " + std::to_string(referent) + " uniquely");
  Rng rng(seed);
  return ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)];
}

/// One image sample: scene, chosen referent and its expression.
struct ImageSample {
  SceneSpec scene;
  std::size_t referent = 0;
  Expression expression;
};

/// Draws a scene and a uniquely describable referent, resampling on failure.
inline ImageSample gen_image_sample(std::uint64_t seed, const SynthConfig& cfg) {
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    const auto s = derive_seed(seed, attempt);
    SceneSpec scene;
    try {
      scene = gen_scene(s, cfg);
    } catch (const GenerationError&) {
      continue;
    }
    Rng rng(derive_seed(s, 1));
    const auto referent = std::uniform_int_distribution<std::size_t>(0, scene.shapes.size() - 1)(rng);
    auto ok = unique_expressions(scene, referent);
    if (ok.empty()) continue;
    return {scene, referent, gen_expression(scene, referent, derive_seed(s, 2))};
  }
  throw GenerationError("no valid sample after 64 scene draws");
}

// ---------------------------------------------------------------------------
// Video

struct Velocity {
  double dx = 0, dy = 0;
};

struct VideoSample {
  std::vector<SceneSpec> frames;
  std::vector<Velocity> velocity;  // initial per-shape velocity
  std::size_t referent = 0;
  Expression expression;
};

/// Advances one shape by one frame, reflecting off the canvas borders.
inline void step_shape(ShapeSpec& s, Velocity& v, double canvas) {
  s.cx += v.dx;
  s.cy += v.dy;
  const double lo = s.extent + 1, hi = canvas - s.extent - 1;
  if (s.cx < lo) { s.cx = 2 * lo - s.cx; v.dx = -v.dx; }
  if (s.cx > hi) { s.cx = 2 * hi - s.cx; v.dx = -v.dx; }
  if (s.cy < lo) { s.cy = 2 * lo - s.cy; v.dy = -v.dy; }
  if (s.cy > hi) { s.cy = 2 * hi - s.cy; v.dy = -v.dy; }
}

/// Moving-shape clip: constant-velocity motion with border reflection, shapes
/// kept apart in every frame, and one expression valid in every frame.
inline VideoSample gen_video(std::uint64_t seed, const SynthConfig& cfg) {
  if (cfg.frames == 0) throw GenerationError("video needs at least one frame");
  for (std::uint64_t attempt = 0; attempt < 256; ++attempt) {
    const auto s = derive_seed(seed, attempt);
    SceneSpec first;
    try {
      first = gen_scene(s, cfg);
    } catch (const GenerationError&) {
      continue;
    }
    Rng rng(derive_seed(s, 7));
    VideoSample vid;
    for (std::size_t i = 0; i < first.shapes.size(); ++i) {
      const double speed = std::uniform_real_distribution<double>(cfg.speed[0], cfg.speed[1])(rng);
      const double angle = std::uniform_real_distribution<double>(0.0, 2.0 * M_PI)(rng);
      vid.velocity.push_back({speed * std::cos(angle), speed * std::sin(angle)});
    }
    auto vel = vid.velocity;
    SceneSpec cur = first;
    bool apart = true;
    for (std::size_t f = 0; f < cfg.frames && apart; ++f) {
      if (f > 0)
        for (std::size_t i = 0; i < cur.shapes.size(); ++i) step_shape(cur.shapes[i], vel[i], double(cfg.canvas));
      for (std::size_t i = 0; i < cur.shapes.size() && apart; ++i)
        for (std::size_t j = i + 1; j < cur.shapes.size() && apart; ++j)
          apart = boxes_disjoint(cur.shapes[i], cur.shapes[j]);
      vid.frames.push_back(cur);
    }
    if (!apart) continue;
    const auto referent = std::uniform_int_distribution<std::size_t>(0, first.shapes.size() - 1)(rng);
    // Expressions valid in every frame.
    auto ok = unique_expressions(vid.frames[0], referent);
    for (std::size_t f = 1; f < vid.frames.size(); ++f) {
      auto here = unique_expressions(vid.frames[f], referent);
      std::erase_if(ok, [&](const Expression& e) {
        return std::none_of(here.begin(), here.end(), [&](const Expression& h) { return h.text() == e.text(); });
      });
    }
    if (ok.empty()) continue;
    vid.referent = referent;
    vid.expression = ok[std::uniform_int_distribution<std::size_t>(0, ok.size() - 1)(rng)];
    return vid;
  }
  throw GenerationError("no valid video after 256 draws");
}

}  // namespace cmsa::synth
