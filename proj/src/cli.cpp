#include "pemp/cli.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "pemp/ablate.hpp"
#include "pemp/gradcheck.hpp"
#include "pemp/png_io.hpp"
#include "pemp/report.hpp"

namespace pemp {

namespace {

namespace fs = std::filesystem;

// Config assembly shared by every subcommand: defaults, then an optional
// base file, then --config, then per-key flags.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "key=value config file");
    for (const auto& key : config_keys()) {
      if (key == "fold" || key == "shots") continue;
      app.add_option("--" + key, values[key], "override config key '" + key + "'");
    }
  }

  RunConfig resolve(const fs::path& base_file = {}) const {
    RunConfig c;
    if (!base_file.empty() && fs::exists(base_file)) c = RunConfig::load(base_file);
    if (!config_path.empty()) c.merge(read_text(config_path));
    for (const auto& [k, v] : values) {
      if (!v.empty()) c.set(k, v);
    }
    return c;
  }
};

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoi(item));
  }
  if (out.empty()) throw DataError("empty list '" + s + "'");
  return out;
}

void write_jsonl(const fs::path& path, const std::vector<std::string>& lines) {
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(path, text);
}

std::string describe(const EvalReport& r) {
  std::ostringstream os;
  os << format_table({r}) << "\n" << std::fixed << std::setprecision(2);
  os << "mean-IoU    " << 100.0 * r.mean_iou << " +- " << 100.0 * r.mean_iou_std << "\n";
  os << "binary-IoU  " << 100.0 * r.binary_iou << " +- " << 100.0 * r.binary_iou_std << "\n";
  os << "runs       ";
  for (double v : r.run_mean_iou) os << " " << 100.0 * v;
  os << "\nper-class  ";
  for (const auto& [c, v] : r.per_class) os << " " << c << ":" << 100.0 * v;
  os << "\nruntime     " << std::setprecision(1) << r.runtime_seconds << " s\nconfig      " << r.config_hash << "\n";
  return os.str();
}

Raster probability_raster(const PredictionMap& pred) {
  Raster r{pred.width(), pred.height(), 1, {}};
  r.pixels.resize(r.width * r.height);
  for (std::size_t y = 0; y < r.height; ++y)
    for (std::size_t x = 0; x < r.width; ++x)
      r.pixels[y * r.width + x] = static_cast<std::uint8_t>(std::lround(255.0 * pred.fg_prob(y, x)));
  return r;
}

Raster image_raster(const Tensor& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Raster r{w, h, c, std::vector<std::uint8_t>(w * h * c)};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        r.pixels[(y * w + x) * c + ch] =
            static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(img.at(ch, y, x), 0.0, 1.0)));
  return r;
}

// FG prototypes in warm shades, BG prototypes in cool shades.
std::vector<PaletteEntry> winner_palette(std::size_t m) {
  std::vector<PaletteEntry> pal;
  for (int region = 0; region < 2; ++region) {
    for (std::size_t i = 0; i < m; ++i) {
      const auto t = static_cast<std::uint8_t>(m > 1 ? 90 + 165 * i / (m - 1) : 255);
      pal.push_back(region == 0 ? PaletteEntry{t, static_cast<std::uint8_t>(t / 3), 0}
                                : PaletteEntry{0, static_cast<std::uint8_t>(t / 2), t});
    }
  }
  return pal;
}

int cmd_gen_data(const ConfigFlags& flags, const std::string& out, std::ostream& os) {
  const RunConfig c = flags.resolve();
  c.validate();
  const auto items = generate_synthetic_dataset(c.num_classes, c.per_class, c.image_side, c.data_seed);
  save_dataset(out, items, {c.num_classes, c.per_class, c.image_side, c.data_seed});
  os << "wrote " << items.size() << " images in " << c.num_classes << " classes to " << out << "\n";
  return kExitOk;
}

int cmd_train(ConfigFlags flags, std::optional<int> fold, std::optional<int> shots, const std::string& stage,
              const std::string& out, std::ostream& os) {
  const fs::path dir(out);
  const bool resume = stage == "seg";
  if (fold || !resume) flags.values["fold"] = std::to_string(fold.value_or(0));
  if (shots || !resume) flags.values["shots"] = std::to_string(shots.value_or(1));
  RunConfig c = flags.resolve(resume ? dir / "config.resolved" : fs::path{});
  if (stage != "both") c.use_seg_stage = resume;
  c.validate();
  fs::create_directories(dir);
  write_text(dir / "config.resolved", c.to_text());
  const auto data = load_dataset(c);
  const FoldSplit split = split_classes(c.num_classes, c.fold);

  std::ofstream log(dir / "metrics.jsonl", stage == "seg" ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  const LogSink sink = [&log](const TrainLogRecord& r) { log << to_jsonl(r) << "\n"; };

  Network prior = make_prior_network(c, c.fold);
  if (stage == "seg") {
    const fs::path p = dir / "prior.ckpt";
    if (!fs::exists(p)) throw IoError("missing checkpoint file: " + p.string());
    prior.load(p);
  } else {
    const StageReport r = train_prior_stage(prior, data, split, c, sink);
    prior.save(dir / "prior.ckpt");
    os << "prior stage: " << r.losses.size() << " episodes, loss " << smoothed_loss(r.losses, 50, 50) << " -> "
       << smoothed_loss(r.losses, r.losses.size(), 50) << ", " << r.seconds << " s\n";
  }
  if (stage != "prior" && c.use_seg_stage) {
    Network seg = make_seg_network(c, c.fold);
    const StageReport r = train_seg_stage(seg, prior, data, split, c, sink);
    seg.save(dir / "seg.ckpt");
    os << "seg stage: " << r.losses.size() << " episodes, loss " << smoothed_loss(r.losses, 50, 50) << " -> "
       << smoothed_loss(r.losses, r.losses.size(), 50) << ", " << r.seconds << " s\n";
  }
  os << "checkpoints in " << dir.string() << "\n";
  return kExitOk;
}

RunConfig eval_config(ConfigFlags flags, const fs::path& ckpt, int fold, int shots) {
  flags.values["fold"] = std::to_string(fold);
  flags.values["shots"] = std::to_string(shots);
  RunConfig c = flags.resolve(ckpt / "config.resolved");
  if (!fs::exists(ckpt / "seg.ckpt") && fs::exists(ckpt / "prior.ckpt")) c.use_seg_stage = false;
  c.validate();
  return c;
}

int cmd_eval(const ConfigFlags& flags, int fold, int shots, std::size_t runs, std::size_t episodes,
             const std::string& ckpt_dir, const std::string& out, std::ostream& os) {
  const fs::path ckpt(ckpt_dir.empty() ? out : ckpt_dir);
  RunConfig c = eval_config(flags, ckpt, fold, shots);
  if (runs) c.eval_runs = runs;
  if (episodes) c.eval_episodes = episodes;
  c.validate();
  const Pipeline pipeline = load_pipeline(c, ckpt);
  const auto data = load_dataset(c);
  const FoldSplit split = split_classes(c.num_classes, c.fold);
  ProtocolOptions opt{c.shots, c.eval_episodes, c.eval_runs, c.eval_seed, 0};
  const ProtocolResult result = evaluate_protocol(data, split, opt, pipeline_predictor(pipeline));
  const EvalReport report = make_report(pipeline.seg ? "PEMP" : "PN", c, split, result);

  const fs::path dir(out);
  write_text(dir / "config.resolved", c.to_text());
  write_text(dir / "report.json", report_to_json(report));
  write_text(dir / "report.txt", describe(report));
  std::vector<std::string> lines;
  for (const auto& e : result.episodes) {
    nlohmann::json j = {{"run", e.run}, {"episode", e.episode}, {"class_id", e.class_id}, {"iou", e.iou}};
    lines.push_back(j.dump());
  }
  write_jsonl(dir / "episodes.jsonl", lines);
  os << describe(report);
  return kExitOk;
}

int cmd_gradcheck(double tolerance, std::ostream& os) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(tolerance)) {
    os << std::left << std::setw(26) << r.name << std::right << std::setw(4) << r.parameters << "  "
       << std::scientific << std::setprecision(3) << r.rel_error << "  " << (r.passed ? "ok" : "FAIL") << "\n";
    ok = ok && r.passed;
  }
  os << (ok ? "all primitives pass\n" : "gradient check FAILED\n");
  return ok ? kExitOk : kExitFailure;
}

int cmd_ablate(const ConfigFlags& flags, const std::vector<std::string>& sweeps, const std::string& folds,
               const std::string& seeds, const std::string& shots, const std::string& out, std::ostream& os) {
  const RunConfig c = flags.resolve();
  c.validate();
  std::vector<AblationVariant> variants;
  if (sweeps.empty()) variants = structure_variants();
  for (const auto& s : sweeps) {
    const auto v = parse_sweep(s);
    variants.insert(variants.end(), v.begin(), v.end());
  }
  AblationOptions opt;
  opt.folds = parse_ints(folds);
  opt.shots = parse_ints(shots);
  opt.seeds.clear();
  for (int s : parse_ints(seeds)) opt.seeds.push_back(static_cast<std::uint64_t>(s));

  const auto data = load_dataset(c);
  ModelCache cache(data);
  const auto rows = run_ablation(data, c, variants, opt, cache);

  const fs::path dir(out);
  write_text(dir / "config.resolved", c.to_text());
  nlohmann::json j = nlohmann::json::array();
  std::vector<std::string> lines;
  for (const auto& r : rows) {
    nlohmann::json row = {{"label", r.label}, {"fold", r.fold},         {"seed", r.seed},
                          {"shots", r.shots}, {"mean_iou", r.mean_iou}, {"binary_iou", r.binary_iou}};
    lines.push_back(row.dump());
    j.push_back(row);
  }
  write_text(dir / "report.json", nlohmann::json{{"config_hash", c.hash()}, {"rows", j}}.dump(2) + "\n");
  write_jsonl(dir / "metrics.jsonl", lines);
  const std::string table = format_ablation(rows);
  write_text(dir / "report.txt", table);
  os << table;
  return kExitOk;
}

int cmd_export_maps(const ConfigFlags& flags, int fold, int shots, std::size_t count, const std::string& ckpt_dir,
                    const std::string& out, std::ostream& os) {
  const fs::path ckpt(ckpt_dir.empty() ? out : ckpt_dir);
  const RunConfig c = eval_config(flags, ckpt, fold, shots);
  const Pipeline pipeline = load_pipeline(c, ckpt);
  const auto data = load_dataset(c);
  const EpisodeSampler sampler(data, split_classes(c.num_classes, c.fold).novel_classes, c.shots, false);
  const fs::path maps = fs::path(out) / "maps";
  fs::create_directories(maps);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(c.eval_seed, 7, i));
    const Episode ep = sampler.sample_slot(rng, i % sampler.pool().size());
    const EpisodeOutput res = predict_episode(pipeline, ep);
    std::ostringstream stem;
    stem << "episode_" << std::setw(3) << std::setfill('0') << i;
    const std::string s = stem.str();
    write_png(maps / (s + "_query.png"), image_raster(ep.query.image));
    write_png(maps / (s + "_gt.png"), image_raster(ep.query.mask));
    write_png(maps / (s + "_prob.png"), probability_raster(res.full));
    write_png(maps / (s + "_pred.png"), image_raster(prediction_mask(res.full)));
    const PredictionMap& coarse = res.coarse;
    const std::size_t m = pipeline.seg ? pipeline.seg->bank.count() : pipeline.prior.bank.count();
    std::vector<std::uint8_t> idx(coarse.winner_index.size());
    for (std::size_t p = 0; p < idx.size(); ++p) {
      idx[p] = static_cast<std::uint8_t>(coarse.winner_region[p] * m + coarse.winner_index[p]);
    }
    write_indexed_png(maps / (s + "_winner.png"), coarse.winner_w, coarse.winner_h, idx, winner_palette(m));
  }
  os << "wrote " << count << " episodes of maps to " << maps.string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot segmentation with meta-prototypes"};
  app.require_subcommand(1);

  ConfigFlags gen_flags, train_flags, eval_flags, ablate_flags, maps_flags;
  std::string out_dir = "out", ckpt_dir, stage = "both", sweep_folds = "0,1,2,3", sweep_seeds = "1",
              sweep_shots = "1";
  int fold = 0, shots = 1;
  std::size_t runs = 0, episodes = 0, count = 8;
  double tolerance = 1e-4;
  std::vector<std::string> sweeps;

  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset as PNG files");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen_flags.attach(*gen);

  auto* train = app.add_subcommand("train", "train the prior and/or segmentation network");
  train->add_option("--fold", fold, "held-out fold")->check(CLI::Range(0, 3));
  train->add_option("--shots", shots, "support images per episode")->check(CLI::PositiveNumber);
  train->add_option("--stage", stage, "stage to train")->check(CLI::IsMember({"prior", "seg", "both"}));
  train->add_option("--out", out_dir, "checkpoint directory");
  train_flags.attach(*train);

  auto* eval = app.add_subcommand("eval", "evaluate checkpoints on novel-class episodes");
  eval->add_option("--fold", fold, "held-out fold")->check(CLI::Range(0, 3));
  eval->add_option("--shots", shots, "support images per episode")->check(CLI::PositiveNumber);
  eval->add_option("--runs", runs, "test runs");
  eval->add_option("--episodes", episodes, "episodes per run");
  eval->add_option("--ckpt", ckpt_dir, "checkpoint directory (default: --out)");
  eval->add_option("--out", out_dir, "report directory");
  eval_flags.attach(*eval);

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad->add_option("--tolerance", tolerance, "maximum relative error");

  auto* ablate = app.add_subcommand("ablate", "module toggles and parameter sweeps");
  ablate->add_option("--sweep", sweeps, "NAME=v1,v2,... with NAME in {M, sigma}");
  ablate->add_option("--folds", sweep_folds, "comma-separated folds");
  ablate->add_option("--seeds", sweep_seeds, "comma-separated seeds");
  ablate->add_option("--shots", sweep_shots, "comma-separated shot counts");
  ablate->add_option("--out", out_dir, "report directory");
  ablate_flags.attach(*ablate);

  auto* maps = app.add_subcommand("export-maps", "write prediction and winner-prototype PNGs");
  maps->add_option("--fold", fold, "held-out fold")->check(CLI::Range(0, 3));
  maps->add_option("--shots", shots, "support images per episode")->check(CLI::PositiveNumber);
  maps->add_option("--count", count, "episodes to export");
  maps->add_option("--ckpt", ckpt_dir, "checkpoint directory (default: --out)");
  maps->add_option("--out", out_dir, "output directory");
  maps_flags.attach(*maps);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(gen_flags, out_dir, out);
    if (*train) {
      auto given = [&](const char* flag, int v) { return train->count(flag) ? std::optional<int>(v) : std::nullopt; };
      return cmd_train(train_flags, given("--fold", fold), given("--shots", shots), stage, out_dir, out);
    }
    if (*eval) return cmd_eval(eval_flags, fold, shots, runs, episodes, ckpt_dir, out_dir, out);
    if (*grad) return cmd_gradcheck(tolerance, out);
    if (*ablate) return cmd_ablate(ablate_flags, sweeps, sweep_folds, sweep_seeds, sweep_shots, out_dir, out);
    if (*maps) return cmd_export_maps(maps_flags, fold, shots, count, ckpt_dir, out_dir, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace pemp
