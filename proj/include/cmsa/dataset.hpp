#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "cmsa/image_io.hpp"
#include "cmsa/language.hpp"
#include "cmsa/synth.hpp"

namespace cmsa {

inline constexpr std::array<const char*, 3> kSplitNames{"train", "val", "test"};

struct SplitCounts {
  std::size_t train = 0, val = 0, test = 0;

  std::size_t total() const { return train + val + test; }
  std::size_t operator[](std::size_t i) const { return i == 0 ? train : i == 1 ? val : test; }
};

/// Largest-remainder rounding of n * ratios, ratios normalised to sum 1.
inline SplitCounts split_counts(std::size_t n, const std::array<double, 3>& ratios) {
  if (n == 0) throw UsageError("dataset size must be at least 1");
  double total = 0;
  for (double r : ratios) {
    if (!(r >= 0)) throw UsageError("split ratios must be non-negative");
    total += r;
  }
  if (total <= 0) throw UsageError("split ratios sum to zero");
  std::array<std::size_t, 3> c{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = double(n) * ratios[i] / total;
    c[i] = std::size_t(std::floor(exact));
    rem[i] = exact - double(c[i]);
    assigned += c[i];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < 3; ++i)
      if (rem[i] > rem[best]) best = i;
    ++c[best];
    rem[best] = -1;
    ++assigned;
  }
  return {c[0], c[1], c[2]};
}

struct DatasetOptions {
  SplitCounts counts{2000, 200, 200};
  std::uint64_t seed = 0;
  synth::SynthConfig synth{};
  bool video = false;
};

/// One manifest line. For video samples `image` and `mask` name the frames/
/// and masks/ directories.
struct ManifestEntry {
  std::string split;
  std::string image, expression, mask;
};

struct Manifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::vector<ManifestEntry> split(const std::string& name) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == name) out.push_back(e);
    return out;
  }
};

namespace detail {

inline std::string sample_dir_name(std::size_t id) {
  std::ostringstream os;
  os << "sample_" << std::setw(5) << std::setfill('0') << id;
  return os.str();
}

inline std::string frame_name(std::size_t t, const char* ext) {
  std::ostringstream os;
  os << "frame_" << std::setw(5) << std::setfill('0') << t << ext;
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::string describe_shapes(const synth::SceneSpec& scene) {
  std::ostringstream os;
  for (std::size_t i = 0; i < scene.shapes.size(); ++i) {
    const auto& s = scene.shapes[i];
    os << (i ? ";" : "") << synth::name(s.size) << ' ' << synth::name(s.color) << ' ' << synth::name(s.kind) << '@'
       << s.cx << ',' << s.cy << 'r' << s.extent;
  }
  return os.str();
}

inline void write_image_sample(const std::filesystem::path& dir, const synth::ImageSample& s, std::uint64_t seed) {
  auto r = synth::render(s.scene);
  write_ppm(dir / "image.ppm", Image8{r.width, r.height, 3, r.rgb});
  write_pgm(dir / "mask.pgm", gray_image(r.height, r.width, r.masks[s.referent]));
  write_text(dir / "expr.txt", s.expression.text() + "\n");
  std::ostringstream meta;
  meta << "seed=" << seed << "\nreferent=" << s.referent << "\nshapes=" << describe_shapes(s.scene) << '\n';
  write_text(dir / "meta.txt", meta.str());
}

inline void write_video_sample(const std::filesystem::path& dir, const synth::VideoSample& v, std::uint64_t seed) {
  std::filesystem::create_directories(dir / "frames");
  std::filesystem::create_directories(dir / "masks");
  for (std::size_t t = 0; t < v.frames.size(); ++t) {
    auto r = synth::render(v.frames[t]);
    write_ppm(dir / "frames" / frame_name(t, ".ppm"), Image8{r.width, r.height, 3, r.rgb});
    write_pgm(dir / "masks" / frame_name(t, ".pgm"), gray_image(r.height, r.width, r.masks[v.referent]));
  }
  write_text(dir / "expr.txt", v.expression.text() + "\n");
  std::ostringstream meta;
  meta << "seed=" << seed << "\nreferent=" << v.referent << "\nframes=" << v.frames.size()
       << "\nshapes=" << describe_shapes(v.frames[0]) << "\nvelocity=";
  for (std::size_t i = 0; i < v.velocity.size(); ++i)
    meta << (i ? ";" : "") << std::setprecision(17) << v.velocity[i].dx << ',' << v.velocity[i].dy;
  meta << '\n';
  write_text(dir / "meta.txt", meta.str());
}

}  // namespace detail

/// Writes out_dir/{train,val,test}/sample_<id>/..., manifest.tsv and vocab.txt.
/// Sample i always uses seed derive_seed(seed, i), and ids are assigned to
/// train, then val, then test, so the splits partition the seed range.
inline Manifest gen_dataset(const DatasetOptions& opt, const std::filesystem::path& out_dir) {
  if (opt.counts.total() == 0) throw UsageError("dataset size must be at least 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  Manifest m;
  m.root = out_dir;
  std::size_t id = 0;
  for (std::size_t split = 0; split < 3; ++split) {
    for (std::size_t k = 0; k < opt.counts[split]; ++k, ++id) {
      const auto seed = derive_seed(opt.seed, id);
      const std::filesystem::path rel = std::filesystem::path(kSplitNames[split]) / detail::sample_dir_name(id);
      std::filesystem::create_directories(out_dir / rel, ec);
      if (ec) throw IoError("cannot create " + (out_dir / rel).string() + ": " + ec.message());
      ManifestEntry e{kSplitNames[split], "", (rel / "expr.txt").generic_string(), ""};
      if (opt.video) {
        detail::write_video_sample(out_dir / rel, synth::gen_video(seed, opt.synth), seed);
        e.image = (rel / "frames").generic_string();
        e.mask = (rel / "masks").generic_string();
      } else {
        detail::write_image_sample(out_dir / rel, synth::gen_image_sample(seed, opt.synth), seed);
        e.image = (rel / "image.ppm").generic_string();
        e.mask = (rel / "mask.pgm").generic_string();
      }
      m.entries.push_back(std::move(e));
    }
  }
  std::ostringstream tsv;
  for (const auto& e : m.entries) tsv << e.split << '\t' << e.image << '\t' << e.expression << '\t' << e.mask << '\n';
  detail::write_text(out_dir / "manifest.tsv", tsv.str());
  Vocabulary(synth::template_vocabulary()).save((out_dir / "vocab.txt").string());
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& dataset_dir) {
  const auto path = dataset_dir / "manifest.tsv";
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.root = dataset_dir;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 4)
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 4 tab-separated fields");
    if (fields[0] != "train" && fields[0] != "val" && fields[0] != "test")
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": unknown split '" + fields[0] + "'");
    m.entries.push_back({fields[0], fields[1], fields[2], fields[3]});
  }
  if (m.entries.empty()) throw DataError("manifest " + path.string() + " lists no samples");
  return m;
}

inline std::string read_expression(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(f, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

/// Decoded sample held in memory: one frame for images, the whole clip for videos.
struct LoadedSample {
  std::string expression;
  std::vector<Image8> frames;
  std::vector<std::vector<std::uint8_t>> masks;  // {0, 1} per pixel, one per frame
  std::string id;
};

inline std::vector<std::filesystem::path> sorted_files(const std::filesystem::path& dir, const std::string& ext) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline LoadedSample load_sample(const Manifest& m, const ManifestEntry& e) {
  LoadedSample s;
  s.expression = read_expression(m.root / e.expression);
  s.id = std::filesystem::path(e.expression).parent_path().filename().string();
  const auto image = m.root / e.image;
  if (std::filesystem::is_directory(image)) {
    for (const auto& p : sorted_files(image, ".ppm")) s.frames.push_back(read_ppm(p));
    for (const auto& p : sorted_files(m.root / e.mask, ".pgm")) s.masks.push_back(mask_bits(read_pgm(p)));
    if (s.frames.empty()) throw DataError("no frames in " + image.string());
  } else {
    s.frames.push_back(read_ppm(image));
    s.masks.push_back(mask_bits(read_pgm(m.root / e.mask)));
  }
  if (s.masks.size() != s.frames.size()) throw DataError("frame / mask count mismatch for " + image.string());
  for (std::size_t t = 0; t < s.frames.size(); ++t)
    if (s.masks[t].size() != s.frames[t].width * s.frames[t].height)
      throw DataError("mask size differs from image size for " + image.string());
  return s;
}

inline std::vector<LoadedSample> load_split(const Manifest& m, const std::string& split) {
  std::vector<LoadedSample> out;
  for (const auto& e : m.split(split)) out.push_back(load_sample(m, e));
  return out;
}

}  // namespace cmsa
