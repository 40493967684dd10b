#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "cmsa/error.hpp"
#include "cmsa/tensor.hpp"

namespace cmsa {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'S', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class EntryType : std::uint8_t { float32 = 1, float64 = 2, uint64 = 3, uint8 = 4 };

inline std::size_t entry_type_size(EntryType t) {
  switch (t) {
    case EntryType::float32: return 4;
    case EntryType::float64: return 8;
    case EntryType::uint64: return 8;
    case EntryType::uint8: return 1;
  }
  throw DataError("unknown checkpoint dtype tag " + std::to_string(int(t)));
}

/// One named array: extents, element type and raw little-endian bytes.
struct CheckpointEntry {
  Shape shape;
  EntryType type = EntryType::float32;
  std::vector<std::uint8_t> bytes;

  bool operator==(const CheckpointEntry&) const = default;
};

/// Ordered name -> entry map with typed accessors.
class Checkpoint {
 public:
  template <class T>
  void put_tensor(const std::string& name, const Tensor<T>& t) {
    const auto& d = t.data();
    put_raw(name, t.shape(), std::is_same_v<T, float> ? EntryType::float32 : EntryType::float64, d.data(),
            d.size() * sizeof(T));
  }

  void put_u64(const std::string& name, std::uint64_t v) { put_raw(name, {1}, EntryType::uint64, &v, sizeof v); }

  void put_f64(const std::string& name, double v) { put_raw(name, {1}, EntryType::float64, &v, sizeof v); }

  void put_text(const std::string& name, const std::string& s) {
    put_raw(name, {s.size()}, EntryType::uint8, s.data(), s.size());
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const CheckpointEntry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("checkpoint has no entry '" + name + "'");
    return it->second;
  }

  template <class T>
  Tensor<T> tensor(const std::string& name) const {
    const auto& e = entry(name);
    const auto want = std::is_same_v<T, float> ? EntryType::float32 : EntryType::float64;
    if (e.type != want) throw DataError("checkpoint entry '" + name + "' has a different element type");
    std::vector<T> data(numel(e.shape));
    std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
    return Tensor<T>(e.shape, std::move(data));
  }

  /// Copies a stored array into an existing leaf of the same shape.
  template <class T>
  void load_into(const std::string& name, Tensor<T>& dst) const {
    const auto& e = entry(name);
    if (e.shape != dst.shape())
      throw DataError("checkpoint entry '" + name + "' has shape " + to_string(e.shape) + ", expected " +
                      to_string(dst.shape()));
    auto src = tensor<T>(name);
    auto d = dst.mutable_data();
    std::copy(src.data().begin(), src.data().end(), d.begin());
  }

  std::uint64_t u64(const std::string& name) const { return scalar<std::uint64_t>(name, EntryType::uint64); }
  double f64(const std::string& name) const { return scalar<double>(name, EntryType::float64); }

  std::string text(const std::string& name) const {
    const auto& e = entry(name);
    if (e.type != EntryType::uint8) throw DataError("checkpoint entry '" + name + "' is not text");
    return std::string(e.bytes.begin(), e.bytes.end());
  }

  const std::map<std::string, CheckpointEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  bool operator==(const Checkpoint&) const = default;

  void put_raw(const std::string& name, const Shape& shape, EntryType type, const void* data, std::size_t bytes) {
    if (name.empty()) throw UsageError("checkpoint entry names must be non-empty");
    if (bytes != numel(shape) * entry_type_size(type)) throw DimensionError("checkpoint entry '" + name + "': size mismatch");
    CheckpointEntry e{shape, type, std::vector<std::uint8_t>(bytes)};
    if (bytes) std::memcpy(e.bytes.data(), data, bytes);
    entries_[name] = std::move(e);
  }

 private:
  template <class U>
  U scalar(const std::string& name, EntryType type) const {
    const auto& e = entry(name);
    if (e.type != type || e.bytes.size() != sizeof(U)) throw DataError("checkpoint entry '" + name + "' has the wrong type");
    U v;
    std::memcpy(&v, e.bytes.data(), sizeof v);
    return v;
  }

  std::map<std::string, CheckpointEntry> entries_;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}
  const std::uint8_t* take(std::size_t n) {
    if (n > b_.size() - pos_) throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Byte layout: magic, u32 version, u32 count, then per entry u32 name length,
/// name, u32 rank, u32 extents, u8 dtype, raw scalars. Entries in name order.
inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, std::uint32_t(ck.size()));
  for (const auto& [name, e] : ck.entries()) {
    detail::put_u32(out, std::uint32_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_u32(out, std::uint32_t(e.shape.size()));
    for (auto d : e.shape) detail::put_u32(out, std::uint32_t(d));
    out.push_back(std::uint8_t(e.type));
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (std::memcmp(r.take(8), kCheckpointMagic, 8) != 0) throw DataError("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u32();
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u32();
    const auto* np = r.take(len);
    std::string name(reinterpret_cast<const char*>(np), len);
    if (ck.contains(name)) throw DataError("duplicate checkpoint entry '" + name + "'");
    const auto rank = r.u32();
    if (rank > 8) throw DataError("checkpoint entry '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const auto type = EntryType(*r.take(1));
    const auto n = numel(shape) * entry_type_size(type);
    ck.put_raw(name, shape, type, r.take(n), n);
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint entries");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace cmsa
