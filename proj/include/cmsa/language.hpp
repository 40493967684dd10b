#pragma once

#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cmsa/ops.hpp"
#include "cmsa/rng.hpp"

namespace cmsa {

inline constexpr std::size_t kPadIndex = 0;
inline constexpr std::size_t kUnkIndex = 1;

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = char(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// Token <-> index mapping with reserved slots 0 = PAD and 1 = UNK.
class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<unk>"} {}

  explicit Vocabulary(const std::vector<std::string>& tokens) : Vocabulary() {
    for (const auto& t : tokens) add(t);
  }

  /// Adds a token (case-folded) and returns its index; existing tokens keep theirs.
  std::size_t add(std::string_view token) {
    auto key = lowercase(token);
    if (key.empty()) throw InputError("vocabulary tokens must be non-empty");
    if (auto it = index_.find(key); it != index_.end()) return it->second;
    index_[key] = tokens_.size();
    tokens_.push_back(key);
    return tokens_.size() - 1;
  }

  std::size_t lookup(std::string_view token) const {
    auto it = index_.find(lowercase(token));
    return it == index_.end() ? kUnkIndex : it->second;
  }

  bool contains(std::string_view token) const { return index_.count(lowercase(token)) != 0; }
  const std::string& token(std::size_t index) const { return tokens_.at(index); }
  std::size_t size() const { return tokens_.size(); }

  /// One token per line; line k holds index k + 2.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write vocabulary file " + path);
    for (std::size_t i = 2; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
    if (!out) throw IoError("failed writing vocabulary file " + path);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read vocabulary file " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      if (v.contains(line)) throw DataError("duplicate token '" + line + "' in " + path);
      v.add(line);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::size_t> index_;
};

/// Padded token indices plus validity mask (1 = real token, all before the 0s).
struct TokenSequence {
  std::vector<std::size_t> indices;
  std::vector<std::uint8_t> mask;
  std::size_t n_real = 0;

  std::size_t max_len() const { return indices.size(); }
};

/// Lowercases and splits on whitespace and punctuation.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : text) {
    const auto uc = static_cast<unsigned char>(c);
    if (std::isalnum(uc) || uc >= 0x80) {
      cur.push_back(char(std::tolower(uc)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Unknown words map to UNK; the sequence is truncated to max_len then padded.
inline TokenSequence tokenize(std::string_view expr, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len == 0) throw UsageError("tokenize: max_len must be positive");
  auto words = split_words(expr);
  if (words.empty()) throw InputError("tokenize: empty expression");
  TokenSequence seq;
  seq.n_real = std::min(words.size(), max_len);
  seq.indices.assign(max_len, kPadIndex);
  seq.mask.assign(max_len, 0);
  for (std::size_t i = 0; i < seq.n_real; ++i) {
    seq.indices[i] = vocab.lookup(words[i]);
    seq.mask[i] = 1;
  }
  return seq;
}

/// Embedding rows for each slot; PAD slots are zero and receive no gradient.
template <class T>
Tensor<T> embed(const TokenSequence& tokens, const Tensor<T>& table) {
  return gather_rows(table, std::span<const std::size_t>(tokens.indices), kPadIndex);
}

template <class T>
Tensor<T> init_embedding_table(std::size_t vocab_size, std::size_t dim, Rng& rng) {
  auto table = uniform_tensor<T>({vocab_size, dim}, -0.08, 0.08, rng);
  auto d = table.mutable_data();
  std::fill_n(d.begin() + kPadIndex * dim, dim, T(0));
  return table;
}

/// [8 x H x W] coordinate map: (x_min, x_center, x_max, y_min, y_center, y_max, 1/W, 1/H)
/// per cell, with cell extents mapped onto [-1, 1].
template <class T>
Tensor<T> spatial_coords(std::size_t h, std::size_t w) {
  if (h == 0 || w == 0) throw UsageError("spatial_coords: empty grid");
  std::vector<T> data(8 * h * w);
  const double dw = double(w), dh = double(h);
  auto at = [&](std::size_t c, std::size_t y, std::size_t x) -> T& { return data[(c * h + y) * w + x]; };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      at(0, y, x) = T(2.0 * double(x) / dw - 1.0);
      at(1, y, x) = T((2.0 * double(x) + 1.0) / dw - 1.0);
      at(2, y, x) = T(2.0 * double(x + 1) / dw - 1.0);
      at(3, y, x) = T(2.0 * double(y) / dh - 1.0);
      at(4, y, x) = T((2.0 * double(y) + 1.0) / dh - 1.0);
      at(5, y, x) = T(2.0 * double(y + 1) / dh - 1.0);
      at(6, y, x) = T(1.0 / dw);
      at(7, y, x) = T(1.0 / dh);
    }
  return Tensor<T>({8, h, w}, std::move(data));
}

/// Full multimodal feature map F of shape [N x H x W x (Cv + Cl + 8)]:
/// f_pn = concat(v_p / |v_p|, e_n / |e_n|, s_p), with zero word parts at PAD slots.
template <class T>
Tensor<T> build_multimodal(const Tensor<T>& visual, const Tensor<T>& words, const Tensor<T>& coords,
                           std::span<const std::uint8_t> mask) {
  if (visual.rank() != 3 || coords.rank() != 3 || words.rank() != 2)
    throw DimensionError("build_multimodal: expected V [Cv x H x W], E [N x Cl], S [8 x H x W]");
  const std::size_t h = visual.dim(1), w = visual.dim(2), n = words.dim(0);
  if (coords.dim(0) != 8 || coords.dim(1) != h || coords.dim(2) != w)
    throw DimensionError("build_multimodal: coordinate map " + to_string(coords.shape()) + " does not match " +
                         to_string(visual.shape()));
  if (mask.size() != n) throw DimensionError("build_multimodal: mask length differs from word count");

  auto v = l2_normalize(permute(visual, {1, 2, 0}), 2);  // [H, W, Cv]
  std::vector<T> keep(mask.begin(), mask.end());
  auto e = mul(l2_normalize(words, 1), Tensor<T>({n, 1}, std::move(keep)));  // [N, Cl]
  auto s = permute(coords, {1, 2, 0});                                      // [H, W, 8]

  const auto over_words = Tensor<T>::zeros({n, 1, 1, 1});
  const auto over_cells = Tensor<T>::zeros({1, h, w, 1});
  auto vb = add(reshape(v, {1, h, w, visual.dim(0)}), over_words);
  auto eb = add(reshape(e, {n, 1, 1, words.dim(1)}), over_cells);
  auto sb = add(reshape(s, {1, h, w, 8}), over_words);
  return concat<T>({vb, eb, sb}, 3);
}

}  // namespace cmsa
