#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "cmsa/error.hpp"
#include "cmsa/tensor.hpp"

namespace cmsa {

/// 8-bit raster, `channels` interleaved values per pixel (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline void write_netpbm(const std::filesystem::path& path, const char* magic, const Image8& img) {
  if (img.pixels.size() != img.width * img.height * img.channels)
    throw DimensionError("image buffer does not match " + std::to_string(img.width) + "x" + std::to_string(img.height));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << magic << '\n' << img.width << ' ' << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline std::size_t read_header_int(std::istream& f, const std::filesystem::path& path) {
  f >> std::ws;
  while (f.peek() == '#') {
    std::string skip;
    std::getline(f, skip);
    f >> std::ws;
  }
  long long v = -1;
  if (!(f >> v) || v < 0) throw DataError("malformed header in " + path.string());
  return std::size_t(v);
}

inline Image8 read_netpbm(const std::filesystem::path& path, const std::string& magic, std::size_t channels) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string m;
  f >> m;
  if (m != magic) throw DataError(path.string() + ": expected " + magic + " file, found '" + m + "'");
  Image8 img;
  img.channels = channels;
  img.width = read_header_int(f, path);
  img.height = read_header_int(f, path);
  if (read_header_int(f, path) != 255) throw DataError(path.string() + ": only maxval 255 is supported");
  f.get();
  img.pixels.resize(img.width * img.height * channels);
  f.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
  if (f.gcount() != std::streamsize(img.pixels.size())) throw DataError(path.string() + ": truncated pixel data");
  return img;
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 3) throw DimensionError("write_ppm: expected 3 channels");
  detail::write_netpbm(path, "P6", img);
}

inline void write_pgm(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1) throw DimensionError("write_pgm: expected 1 channel");
  detail::write_netpbm(path, "P5", img);
}

inline Image8 read_ppm(const std::filesystem::path& path) { return detail::read_netpbm(path, "P6", 3); }
inline Image8 read_pgm(const std::filesystem::path& path) { return detail::read_netpbm(path, "P5", 1); }

/// Interleaved RGB bytes -> [3 x H x W] in [0, 1].
template <class T>
Tensor<T> image_tensor(const Image8& img) {
  if (img.channels != 3) throw DimensionError("image_tensor: expected an RGB image");
  const std::size_t hw = img.width * img.height;
  std::vector<T> data(3 * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) data[c * hw + p] = T(img.pixels[p * 3 + c]) / T(255);
  return Tensor<T>({3, img.height, img.width}, std::move(data));
}

/// Gray mask (0 / 255, or any nonzero) -> {0, 1} per pixel.
inline std::vector<std::uint8_t> mask_bits(const Image8& img) {
  if (img.channels != 1) throw DimensionError("mask_bits: expected a gray image");
  std::vector<std::uint8_t> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.pixels[i] ? 1 : 0;
  return out;
}

inline Image8 gray_image(std::size_t height, std::size_t width, std::vector<std::uint8_t> pixels) {
  return Image8{width, height, 1, std::move(pixels)};
}

}  // namespace cmsa
