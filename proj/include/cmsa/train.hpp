#pragma once

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cmsa/checkpoint.hpp"
#include "cmsa/config.hpp"
#include "cmsa/augment.hpp"
#include "cmsa/dataset.hpp"
#include "cmsa/metrics.hpp"
#include "cmsa/model.hpp"

namespace cmsa {

/// A decoded sample ready for the network; images are clips of length one.
struct Item {
  std::string id;
  std::vector<Tensor<float>> frames;               // [3 x H x W]
  std::vector<Tensor<float>> targets;              // [H x W] in {0, 1}
  std::vector<std::vector<std::uint8_t>> masks;    // same, as bytes
  TokenSequence tokens;
};

inline Item make_item(const LoadedSample& s, const Vocabulary& vocab, std::size_t max_words) {
  Item it;
  it.id = s.id;
  it.tokens = tokenize(s.expression, vocab, max_words);
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    it.frames.push_back(image_tensor<float>(s.frames[t]));
    std::vector<float> y(s.masks[t].begin(), s.masks[t].end());
    it.targets.push_back(Tensor<float>({s.frames[t].height, s.frames[t].width}, std::move(y)));
    it.masks.push_back(s.masks[t]);
  }
  return it;
}

inline std::vector<Item> load_items(const Manifest& m, const std::string& split, const Vocabulary& vocab,
                                    std::size_t max_words) {
  std::vector<Item> out;
  for (const auto& s : load_split(m, split)) out.push_back(make_item(s, vocab, max_words));
  return out;
}

inline std::string vocabulary_text(const Vocabulary& v) {
  std::string s;
  for (std::size_t i = 2; i < v.size(); ++i) s += v.token(i) + "\n";
  return s;
}

inline Vocabulary vocabulary_from_text(const std::string& text) {
  Vocabulary v;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line))
    if (!line.empty()) v.add(line);
  return v;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0, val_overall_iou = 0, val_mean_iou = 0, lr = 0;
};

/// Optimizer progress stored alongside the parameters.
struct TrainState {
  std::uint64_t iteration = 0;
  std::uint64_t epoch = 0;  // epochs completed
  double best_val = -1;
  std::uint64_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

inline Checkpoint make_checkpoint(const Model<float>& model, const AdamState<float>& adam, const TrainState& st,
                                  const Config& cfg, const Vocabulary& vocab) {
  Checkpoint ck;
  for (const auto& [name, t] : model.params().entries()) ck.put_tensor("param/" + name, t);
  for (const auto& [name, m] : adam.first_moment)
    ck.put_raw("adam/m/" + name, {m.size()}, EntryType::float32, m.data(), m.size() * sizeof(float));
  for (const auto& [name, v] : adam.second_moment)
    ck.put_raw("adam/v/" + name, {v.size()}, EntryType::float32, v.data(), v.size() * sizeof(float));
  ck.put_u64("adam/step", adam.step);
  ck.put_u64("train/iteration", st.iteration);
  ck.put_u64("train/epoch", st.epoch);
  ck.put_f64("train/best_val", st.best_val);
  ck.put_u64("train/best_epoch", st.best_epoch);
  std::vector<double> rows;
  for (const auto& r : st.history) rows.insert(rows.end(), {double(r.epoch), r.train_loss, r.val_overall_iou, r.val_mean_iou, r.lr});
  ck.put_raw("train/history", {st.history.size(), 5}, EntryType::float64, rows.data(), rows.size() * sizeof(double));
  ck.put_u64("config/hash", config_hash(cfg));
  ck.put_text("config/text", serialize(cfg));
  ck.put_text("vocab/text", vocabulary_text(vocab));
  return ck;
}

inline void restore_training(const Checkpoint& ck, Model<float>& model, AdamState<float>& adam, TrainState& st) {
  for (auto& [name, t] : model.params().entries()) ck.load_into("param/" + name, t);
  adam = {};
  adam.step = ck.u64("adam/step");
  for (const auto& [key, e] : ck.entries()) {
    const bool first = key.rfind("adam/m/", 0) == 0, second = key.rfind("adam/v/", 0) == 0;
    if (!first && !second) continue;
    std::vector<float> buf(numel(e.shape));
    std::memcpy(buf.data(), e.bytes.data(), e.bytes.size());
    (first ? adam.first_moment : adam.second_moment)[key.substr(7)] = std::move(buf);
  }
  st = {};
  st.iteration = ck.u64("train/iteration");
  st.epoch = ck.u64("train/epoch");
  st.best_val = ck.f64("train/best_val");
  st.best_epoch = ck.u64("train/best_epoch");
  const auto h = ck.tensor<double>("train/history");
  for (std::size_t i = 0; i < h.dim(0); ++i)
    st.history.push_back({std::size_t(h[i * 5]), h[i * 5 + 1], h[i * 5 + 2], h[i * 5 + 3], h[i * 5 + 4]});
}

/// Model, configuration and vocabulary rebuilt from a checkpoint.
struct LoadedModel {
  Config config;
  Vocabulary vocab;
  Model<float> model;
};

inline LoadedModel load_model(const Checkpoint& ck) {
  auto cfg = parse_config(ck.text("config/text"));
  if (config_hash(cfg) != ck.u64("config/hash")) throw DataError("checkpoint config text does not match its hash");
  auto vocab = vocabulary_from_text(ck.text("vocab/text"));
  Model<float> model(cfg.model, vocab.size(), cfg.train.seed);
  for (auto& [name, t] : model.params().entries()) ck.load_into("param/" + name, t);
  return {cfg, vocab, std::move(model)};
}

inline LoadedModel load_model(const std::filesystem::path& path) { return load_model(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Inference on prepared items

/// Probability maps for the chosen frames of an item (all frames when empty).
inline std::vector<Tensor<float>> predict_item(const Model<float>& model, const Item& item,
                                               std::vector<std::size_t> targets = {}) {
  const auto& cfg = model.config();
  if (targets.empty()) {
    targets.resize(item.frames.size());
    std::iota(targets.begin(), targets.end(), std::size_t(0));
  }
  std::vector<Tensor<float>> out;
  if (!cfg.video_mode) {
    for (auto t : targets) out.push_back(model.forward(item.frames.at(t), item.tokens).probability);
    return out;
  }
  std::vector<std::optional<LevelFeatures<float>>> enc(item.frames.size());
  for (auto t : targets) {
    std::vector<LevelFeatures<float>> clip;
    for (auto f : extract_clip(item.frames.size(), t, cfg.tau)) {
      if (!enc[f]) enc[f] = model.encode(item.frames[f]);
      clip.push_back(*enc[f]);
    }
    out.push_back(model.forward_encoded_clip(clip, item.tokens, item.frames[t].dim(1), item.frames[t].dim(2)).probability);
  }
  return out;
}

/// Runs every frame of every item without gradients; optionally writes the
/// binarized masks as <dir>/<id>.pgm (video: <dir>/<id>/frame_<t>.pgm).
inline EvalReport evaluate(const Model<float>& model, const std::vector<Item>& items,
                           const std::optional<std::filesystem::path>& mask_dir = std::nullopt) {
  FlushDenormalsGuard ftz;
  NoGradGuard guard;
  std::vector<IouCounts> counts;
  std::vector<std::string> ids;
  for (const auto& item : items) {
    const auto probs = predict_item(model, item);
    for (std::size_t t = 0; t < probs.size(); ++t) {
      const auto mask = binarize(probs[t]);
      counts.push_back(iou_counts(mask.pixels, item.masks[t]));
      ids.push_back(item.frames.size() == 1 ? item.id : item.id + "/" + std::to_string(t));
      if (mask_dir) {
        std::vector<std::uint8_t> px(mask.pixels.size());
        for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask.pixels[i] ? 255 : 0;
        std::filesystem::path path = *mask_dir / (item.id + ".pgm");
        if (item.frames.size() > 1) {
          std::filesystem::create_directories(*mask_dir / item.id);
          path = *mask_dir / item.id / detail::frame_name(t, ".pgm");
        }
        write_pgm(path, gray_image(mask.height, mask.width, std::move(px)));
      }
    }
  }
  return make_report(std::move(counts), std::move(ids));
}

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  std::optional<std::size_t> stop_after_epoch;  // leave the run unfinished after this epoch
  bool resume = false;                          // continue from out_dir/last.ckpt
  std::ostream* log = nullptr;
  std::size_t probe_samples = 100;              // size of the epoch-0 loss probe
};

struct TrainResult {
  TrainState state;
  std::filesystem::path last_checkpoint, best_checkpoint;
};

namespace detail {

inline void check_finite_loss(double loss, std::size_t epoch, std::uint64_t iteration, const std::string& id) {
  if (!std::isfinite(loss))
    throw NumericError("non-finite loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) + ", iteration " +
                       std::to_string(iteration) + " (sample " + id + ")");
}

/// Loss for one training item. Video items encode each needed frame once
/// and share the encodings across the selected target frames.
inline Tensor<float> item_loss(const Model<float>& model, const Item& item, const std::vector<std::size_t>& targets) {
  const auto& cfg = model.config();
  if (!cfg.video_mode) return bce_loss(model.forward(item.frames[0], item.tokens).probability, item.targets[0]);
  std::vector<std::optional<LevelFeatures<float>>> enc(item.frames.size());
  Tensor<float> total;
  for (auto t : targets) {
    std::vector<LevelFeatures<float>> clip;
    for (auto f : extract_clip(item.frames.size(), t, cfg.tau)) {
      if (!enc[f]) enc[f] = model.encode(item.frames[f]);
      clip.push_back(*enc[f]);
    }
    auto p = model.forward_encoded_clip(clip, item.tokens, item.frames[t].dim(1), item.frames[t].dim(2)).probability;
    auto l = bce_loss(p, item.targets[t]);
    total = total.impl() ? add(total, l) : l;
  }
  return scalar_mul(total, 1.0f / float(targets.size()));
}

inline std::vector<std::size_t> pick_targets(std::size_t frames, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(frames);
  std::iota(idx.begin(), idx.end(), std::size_t(0));
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(count, frames));
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_overall_iou,val_mean_iou,lr\n" << std::setprecision(10);
  for (const auto& r : history)
    os << r.epoch << ',' << r.train_loss << ',' << r.val_overall_iou << ',' << r.val_mean_iou << ',' << r.lr << '\n';
  write_text(path, os.str());
}

}  // namespace detail

/// Adam with polynomial decay over epochs x ceil(N / batch_size) steps.
/// Writes metrics.csv, last.ckpt and best.ckpt (highest val overall IoU) into
/// out_dir. Row 0 of the log holds the untrained model's probe loss and
/// validation scores.
inline TrainResult train(const Config& cfg, const std::filesystem::path& dataset_dir, const std::filesystem::path& out_dir,
                         const TrainOptions& opt = {}) {
  FlushDenormalsGuard ftz;
  validate(cfg);
  const auto manifest = load_manifest(dataset_dir);
  const auto vocab = Vocabulary::load((dataset_dir / "vocab.txt").string());
  const auto train_samples = load_split(manifest, "train");
  std::vector<Item> train_items;
  for (const auto& smp : train_samples) train_items.push_back(make_item(smp, vocab, cfg.model.max_words));
  const auto val_items = load_items(manifest, "val", vocab, cfg.model.max_words);
  if (train_items.empty()) throw DataError("dataset " + dataset_dir.string() + " has no training samples");
  for (const auto& it : train_items) {
    if (it.frames[0].dim(1) != cfg.model.image_size || it.frames[0].dim(2) != cfg.model.image_size)
      throw DataError("sample " + it.id + " does not match image_size " + std::to_string(cfg.model.image_size));
    if (!cfg.model.video_mode && it.frames.size() != 1)
      throw DataError("dataset holds videos; set video_mode=true to train on it");
  }
  std::filesystem::create_directories(out_dir);

  Model<float> model(cfg.model, vocab.size(), cfg.train.seed);
  AdamState<float> adam;
  TrainState st;
  auto params = model.trainable();
  const auto last_path = out_dir / "last.ckpt", best_path = out_dir / "best.ckpt";
  auto log = [&](const std::string& line) {
    if (opt.log) *opt.log << line << std::endl;
  };

  if (opt.resume) {
    const auto ck = load_checkpoint(last_path);
    if (ck.u64("config/hash") != config_hash(cfg))
      throw ConfigError("checkpoint " + last_path.string() + " was written with a different configuration");
    restore_training(ck, model, adam, st);
    log("resumed after epoch " + std::to_string(st.epoch));
  }

  auto validate_model = [&](double& overall, double& mean) {
    if (val_items.empty()) {
      overall = mean = std::numeric_limits<double>::quiet_NaN();
      return;
    }
    auto rep = evaluate(model, val_items);
    overall = rep.overall_iou;
    mean = rep.mean_iou;
  };

  const std::size_t steps_per_epoch = (train_items.size() + cfg.train.batch_size - 1) / cfg.train.batch_size;
  const std::uint64_t max_iter = std::uint64_t(steps_per_epoch) * cfg.train.epochs;

  if (st.history.empty()) {
    EpochRecord r;
    {
      NoGradGuard guard;
      double total = 0;
      const std::size_t n = std::min(opt.probe_samples, train_items.size());
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> all(train_items[i].frames.size());
        std::iota(all.begin(), all.end(), std::size_t(0));
        total += double(detail::item_loss(model, train_items[i], all).item());
      }
      r.train_loss = total / double(n);
    }
    validate_model(r.val_overall_iou, r.val_mean_iou);
    r.lr = poly_lr(cfg.train.lr, 0, max_iter, cfg.train.poly_power);
    st.history.push_back(r);
    log("epoch 0 probe_loss=" + std::to_string(r.train_loss) + " val_overall_iou=" + std::to_string(r.val_overall_iou));
  }

  while (st.epoch < cfg.train.epochs) {
    const std::size_t epoch = st.epoch + 1;
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(train_items.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng shuffle_rng(derive_seed(cfg.train.seed, 0x5eed0000 + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = poly_lr(cfg.train.lr, st.iteration, max_iter, cfg.train.poly_power);
    double loss_sum = 0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t begin = step * cfg.train.batch_size;
      const std::size_t end = std::min(begin + cfg.train.batch_size, order.size());
      const float scale = 1.0f / float(end - begin);
      for (std::size_t b = begin; b < end; ++b) {
        std::optional<Item> augmented;
        if (cfg.train.augment) {
          const auto& smp = train_samples[order[b]];
          const auto a = draw_augmentation(smp, derive_seed(cfg.train.seed, (std::uint64_t(epoch) << 32) + b + 0xA0000000));
          augmented = make_item(augment(smp, a), vocab, cfg.model.max_words);
        }
        const auto& item = augmented ? *augmented : train_items[order[b]];
        std::vector<std::size_t> targets{0};
        if (cfg.model.video_mode)
          targets = detail::pick_targets(item.frames.size(), cfg.train.frames_per_step,
                                         derive_seed(cfg.train.seed, (std::uint64_t(epoch) << 32) + b));
        auto loss = detail::item_loss(model, item, targets);
        const double lv = double(loss.item());
        detail::check_finite_loss(lv, epoch, st.iteration, item.id);
        loss_sum += lv;
        backward(scalar_mul(loss, scale));
      }
      adam_step(params, adam, poly_lr(cfg.train.lr, st.iteration, max_iter, cfg.train.poly_power),
                cfg.train.weight_decay);
      ++st.iteration;
    }
    rec.train_loss = loss_sum / double(train_items.size());
    validate_model(rec.val_overall_iou, rec.val_mean_iou);
    st.epoch = epoch;
    st.history.push_back(rec);
    const bool improved = val_items.empty() || rec.val_overall_iou > st.best_val;
    if (improved) {
      st.best_val = val_items.empty() ? st.best_val : rec.val_overall_iou;
      st.best_epoch = epoch;
    }
    const auto ck = make_checkpoint(model, adam, st, cfg, vocab);
    save_checkpoint(last_path, ck);
    if (improved) save_checkpoint(best_path, ck);
    detail::write_metrics_csv(out_dir / "metrics.csv", st.history);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream os;
    os << "epoch " << epoch << " train_loss=" << rec.train_loss << " val_overall_iou=" << rec.val_overall_iou
       << " val_mean_iou=" << rec.val_mean_iou << " lr=" << rec.lr << " (" << std::fixed << std::setprecision(1) << secs
       << " s)";
    log(os.str());
    if (opt.stop_after_epoch && epoch >= *opt.stop_after_epoch) break;
  }
  if (st.epoch == 0 || !std::filesystem::exists(last_path)) {
    const auto ck = make_checkpoint(model, adam, st, cfg, vocab);
    save_checkpoint(last_path, ck);
    save_checkpoint(best_path, ck);
    detail::write_metrics_csv(out_dir / "metrics.csv", st.history);
  }
  return {st, last_path, best_path};
}

}  // namespace cmsa
