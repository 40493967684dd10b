#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cmsa/inference.hpp"

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

cmsa::Config resolve_config(const Globals& g) {
  cmsa::Config cfg;
  if (!g.config_path.empty()) cfg = cmsa::load_config(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw cmsa::ConfigError("--set expects key=value, got '" + kv + "'");
    cmsa::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) cfg.train.seed = *g.seed;
  cmsa::validate(cfg);
  return cfg;
}

fs::path require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw cmsa::UsageError(std::string(what) + " needs --out");
  return g.out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal self-attention referring segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "key=value configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "seed for data generation, initialization and shuffling");
  app.add_option("--out", g.out, "output file or directory");
  app.add_option("--set", g.overrides, "override a configuration key (key=value), repeatable");

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");

  auto* tr = app.add_subcommand("train", "train a model");
  std::string data_dir;
  bool resume = false;
  std::optional<std::size_t> stop_after;
  tr->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_flag("--resume", resume, "continue from <out>/last.ckpt");
  tr->add_option("--stop-after-epoch", stop_after, "stop after this epoch");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string ckpt, split = "val";
  bool save_masks = false;
  ev->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_flag("--masks", save_masks, "write predicted masks under <out>/masks");

  auto* inf = app.add_subcommand("infer", "segment one image or a directory of frames");
  std::string input, expr, heatmap;
  inf->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  inf->add_option("--input", input, "image.ppm or a directory of frames")->required()->check(CLI::ExistingPath);
  inf->add_option("--expr", expr, "referring expression")->required();
  inf->add_option("--heatmap", heatmap, "probability heatmap output (file or directory)");

  auto* viz = app.add_subcommand("viz-attn", "word attention CSV and fused-feature heatmap");
  std::size_t frame = 0;
  viz->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  viz->add_option("--input", input, "image.ppm or a directory of frames")->required()->check(CLI::ExistingPath);
  viz->add_option("--expr", expr, "referring expression")->required();
  viz->add_option("--frame", frame, "target frame for frame directories");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = resolve_config(g);
      const auto out = require_out(g, "gen-data");
      const auto m = cmsa::gen_dataset(cfg.dataset_options(), out);
      std::cout << "wrote " << m.entries.size() << " samples; manifest " << (out / "manifest.tsv").string() << "\n";
    } else if (tr->parsed()) {
      const auto cfg = resolve_config(g);
      cmsa::TrainOptions opt;
      opt.resume = resume;
      opt.stop_after_epoch = stop_after;
      opt.log = &std::cout;
      const auto res = cmsa::train(cfg, data_dir, require_out(g, "train"), opt);
      std::cout << "best val overall IoU " << res.state.best_val << " at epoch " << res.state.best_epoch << "\n";
    } else if (ev->parsed()) {
      const auto lm = cmsa::load_model(fs::path(ckpt));
      const auto manifest = cmsa::load_manifest(data_dir);
      const auto items = cmsa::load_items(manifest, split, lm.vocab, lm.config.model.max_words);
      if (items.empty()) throw cmsa::DataError("split '" + split + "' is empty");
      std::optional<fs::path> mask_dir;
      if (!g.out.empty()) {
        fs::create_directories(g.out);
        if (save_masks) {
          mask_dir = fs::path(g.out) / "masks";
          fs::create_directories(*mask_dir);
        }
      }
      const auto rep = cmsa::evaluate(lm.model, items, mask_dir);
      cmsa::write_report(std::cout, rep);
      if (!g.out.empty()) {
        std::ofstream txt(fs::path(g.out) / "report.txt"), csv(fs::path(g.out) / "per_sample.csv");
        cmsa::write_report(txt, rep);
        cmsa::write_per_sample_csv(csv, rep);
      }
    } else if (inf->parsed()) {
      const auto lm = cmsa::load_model(fs::path(ckpt));
      std::optional<fs::path> hm;
      if (!heatmap.empty()) hm = heatmap;
      const auto res = cmsa::infer(lm, input, expr, fs::path(require_out(g, "infer")), hm);
      std::cout << "wrote " << res.masks.size() << " mask(s) to " << g.out << "\n";
    } else if (viz->parsed()) {
      const auto lm = cmsa::load_model(fs::path(ckpt));
      const auto v = cmsa::viz_attention(lm, input, expr, frame);
      const auto out = require_out(g, "viz-attn");
      cmsa::write_attention_viz(out, v);
      cmsa::write_word_attention_csv(std::cout, v.matrix, v.words);
    }
  } catch (const cmsa::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
