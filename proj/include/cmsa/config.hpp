#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cmsa/dataset.hpp"
#include "cmsa/model.hpp"

namespace cmsa {

struct TrainConfig {
  double lr = 2.5e-4;
  double weight_decay = 5e-4;
  double poly_power = 0.9;
  std::size_t epochs = 10;
  std::size_t batch_size = 1;       // samples per optimizer step (gradient accumulation)
  std::size_t frames_per_step = 4;  // video: target frames per clip per step
  bool augment = false;             // random shift, vertical flip and palette relabeling per step
  std::uint64_t seed = 0;
};

struct DataConfig {
  SplitCounts counts{2000, 200, 200};
  std::size_t min_shapes = 1, max_shapes = 3;
  std::size_t frames = 12;
  double speed_min = 0.5, speed_max = 2.0;
  bool video = false;
};

/// Every tunable value; file and command line both use the flat key names.
struct Config {
  ModelConfig model{};
  TrainConfig train{};
  DataConfig data{};

  DatasetOptions dataset_options() const {
    DatasetOptions o;
    o.counts = data.counts;
    o.seed = train.seed;
    o.synth.canvas = model.image_size;
    o.synth.min_shapes = data.min_shapes;
    o.synth.max_shapes = data.max_shapes;
    o.synth.frames = data.frames;
    o.synth.speed = {data.speed_min, data.speed_max};
    o.video = data.video;
    return o;
  }
};

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class U>
U parse_unsigned(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || v > std::numeric_limits<U>::max())
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + s + "'");
  return U(v);
}

inline double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + s + "'");
}

struct Field {
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

inline const std::map<std::string, Field>& config_fields() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    auto size_field = [&](const char* key, auto member) {
      f[key] = {[member](const Config& c) { return std::to_string(member(c)); },
                [member, key](Config& c, const std::string& v) { member(c) = parse_unsigned<std::size_t>(key, v); }};
    };
    auto double_field = [&](const char* key, auto member) {
      f[key] = {[member](const Config& c) { return format_double(member(c)); },
                [member, key](Config& c, const std::string& v) { member(c) = parse_double(key, v); }};
    };
    auto bool_field = [&](const char* key, auto member) {
      f[key] = {[member](const Config& c) { return std::string(member(c) ? "true" : "false"); },
                [member, key](Config& c, const std::string& v) { member(c) = parse_bool(key, v); }};
    };
    size_field("image_size", [](auto& c) -> auto& { return c.model.image_size; });
    size_field("stride", [](auto& c) -> auto& { return c.model.encoder.stride; });
    f["channels"] = {
        [](const Config& c) {
          const auto& ch = c.model.encoder.channels;
          return std::to_string(ch[0]) + "," + std::to_string(ch[1]) + "," + std::to_string(ch[2]);
        },
        [](Config& c, const std::string& v) {
          std::stringstream ss(v);
          std::string part;
          std::vector<std::size_t> parts;
          while (std::getline(ss, part, ',')) parts.push_back(parse_unsigned<std::size_t>("channels", part));
          if (parts.size() != 3) throw ConfigError("config key 'channels': expected three comma-separated integers");
          c.model.encoder.channels = {parts[0], parts[1], parts[2]};
        }};
    size_field("word_dim", [](auto& c) -> auto& { return c.model.word_dim; });
    size_field("max_words", [](auto& c) -> auto& { return c.model.max_words; });
    size_field("key_dim", [](auto& c) -> auto& { return c.model.key_dim; });
    size_field("fusion_dim", [](auto& c) -> auto& { return c.model.fusion_dim; });
    size_field("cfsa_key_dim", [](auto& c) -> auto& { return c.model.cfsa_key_dim; });
    size_field("tau", [](auto& c) -> auto& { return c.model.tau; });
    bool_field("no_attention", [](auto& c) -> auto& { return c.model.no_attention; });
    bool_field("scaled_attention", [](auto& c) -> auto& { return c.model.scaled_attention; });
    bool_field("video_mode", [](auto& c) -> auto& { return c.model.video_mode; });
    double_field("lr", [](auto& c) -> auto& { return c.train.lr; });
    double_field("weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; });
    double_field("poly_power", [](auto& c) -> auto& { return c.train.poly_power; });
    size_field("epochs", [](auto& c) -> auto& { return c.train.epochs; });
    size_field("batch_size", [](auto& c) -> auto& { return c.train.batch_size; });
    bool_field("augment", [](auto& c) -> auto& { return c.train.augment; });
    size_field("frames_per_step", [](auto& c) -> auto& { return c.train.frames_per_step; });
    f["seed"] = {[](const Config& c) { return std::to_string(c.train.seed); },
                 [](Config& c, const std::string& v) { c.train.seed = parse_unsigned<std::uint64_t>("seed", v); }};
    size_field("data_train", [](auto& c) -> auto& { return c.data.counts.train; });
    size_field("data_val", [](auto& c) -> auto& { return c.data.counts.val; });
    size_field("data_test", [](auto& c) -> auto& { return c.data.counts.test; });
    size_field("data_min_shapes", [](auto& c) -> auto& { return c.data.min_shapes; });
    size_field("data_max_shapes", [](auto& c) -> auto& { return c.data.max_shapes; });
    size_field("data_frames", [](auto& c) -> auto& { return c.data.frames; });
    double_field("data_speed_min", [](auto& c) -> auto& { return c.data.speed_min; });
    double_field("data_speed_max", [](auto& c) -> auto& { return c.data.speed_max; });
    bool_field("data_video", [](auto& c) -> auto& { return c.data.video; });
    return f;
  }();
  return fields;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : detail::config_fields()) keys.push_back(k);
  return keys;
}

/// Sets one key from its text form. Unknown keys are rejected by name.
inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(c, detail::trim(value));
}

inline std::string get_config_value(const Config& c, const std::string& key) {
  const auto& fields = detail::config_fields();
  auto it = fields.find(key);
  if (it == fields.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(c);
}

/// Range and consistency checks; throws ConfigError naming the offending key.
inline void validate(const Config& c) {
  auto fail = [](const std::string& key, const std::string& why) { throw ConfigError("config key '" + key + "': " + why); };
  const auto& m = c.model;
  if (m.encoder.stride != 8) fail("stride", "only 8 is supported");
  if (m.image_size == 0 || m.image_size % m.encoder.stride != 0) fail("image_size", "must be a positive multiple of stride");
  const auto& ch = m.encoder.channels;
  if (ch[0] == 0 || ch[0] > ch[1] || ch[1] > ch[2]) fail("channels", "must be positive and non-decreasing");
  if (m.word_dim == 0) fail("word_dim", "must be positive");
  if (m.max_words == 0) fail("max_words", "must be positive");
  if (m.key_dim == 0) fail("key_dim", "must be positive");
  if (m.fusion_dim == 0) fail("fusion_dim", "must be positive");
  if (m.cfsa_key_dim == 0) fail("cfsa_key_dim", "must be positive");
  if (!(c.train.lr > 0)) fail("lr", "must be positive");
  if (c.train.weight_decay < 0) fail("weight_decay", "must be non-negative");
  if (!(c.train.poly_power > 0)) fail("poly_power", "must be positive");
  if (c.train.batch_size == 0) fail("batch_size", "must be positive");
  if (c.train.frames_per_step == 0) fail("frames_per_step", "must be positive");
  if (c.data.min_shapes < 1 || c.data.min_shapes > c.data.max_shapes) fail("data_min_shapes", "must lie in 1..data_max_shapes");
  if (c.data.max_shapes > 4) fail("data_max_shapes", "at most 4 shapes fit the canvas");
  if (c.data.frames == 0) fail("data_frames", "must be positive");
  if (c.data.speed_min < 0 || c.data.speed_min > c.data.speed_max) fail("data_speed_min", "must lie in 0..data_speed_max");
}

/// Parses key=value lines; '#' starts a comment.
inline void apply_config_text(Config& c, const std::string& text, const std::string& origin = "config") {
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    set_config_value(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline Config parse_config(const std::string& text) {
  Config c;
  apply_config_text(c, text);
  validate(c);
  return c;
}

inline Config load_config(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  Config c;
  apply_config_text(c, ss.str(), path.string());
  validate(c);
  return c;
}

/// Canonical form: every key in sorted order, one key=value per line.
inline std::string serialize(const Config& c) {
  std::string out;
  for (const auto& [k, f] : detail::config_fields()) out += k + "=" + f.get(c) + "\n";
  return out;
}

/// 64-bit FNV-1a of the canonical serialization.
inline std::uint64_t config_hash(const Config& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : serialize(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cmsa
