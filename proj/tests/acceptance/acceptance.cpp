#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "pemp/ablate.hpp"
#include "pemp/gradcheck.hpp"
#include "pemp/loss.hpp"
#include "pemp/optim.hpp"
#include "pemp/report.hpp"
#include "pemp/trainer.hpp"

using namespace pemp;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

// Reduced network and schedule used for the learning criteria.
RunConfig desk_config() {
  RunConfig c;
  c.widths = {8, 16, 16, 16};
  c.feature_dim = 16;
  c.episodes_per_epoch = 100;
  c.epochs_prior = 15;
  c.epochs_seg = 15;
  c.lr_prior = 0.003;
  c.lr_seg = 0.0105;
  c.channel_shuffle = true;
  c.eval_episodes = 100;
  c.eval_runs = 2;
  return c;
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

// 1 -----------------------------------------------------------------------

double brute_distance(const Tensor& f, std::size_t y, std::size_t x) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t fy = 0; fy < f.dim(1); ++fy)
    for (std::size_t fx = 0; fx < f.dim(2); ++fx)
      if (f.at(0, fy, fx) != 0.0) best = std::min(best, std::hypot(double(fy) - double(y), double(fx) - double(x)));
  return best;
}

Outcome edt_oracle() {
  const auto start = Clock::now();
  Rng rng(2024);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + uniform_index(rng, 32), w = 1 + uniform_index(rng, 32);
    const double density = uniform(rng, 0.002, 0.5);
    Tensor f({1, h, w}, 0.0);
    for (auto& v : f.mutable_data()) v = uniform01(rng) < density ? 1.0 : 0.0;
    f.mutable_data()[uniform_index(rng, h * w)] = 1.0;
    const Tensor d = edt(f);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) worst = std::max(worst, std::abs(d.at(0, y, x) - brute_distance(f, y, x)));
  }
  const double t = seconds_since(start);
  return {worst <= 1e-9 && t < 5.0, "100 maps, max error " + sci(worst) + ", " + fmt(t, 2) + " s"};
}

// 2 -----------------------------------------------------------------------

Outcome gradient_suite() {
  const auto start = Clock::now();
  const auto results = run_gradcheck_suite(1e-4);
  const double t = seconds_since(start);
  bool ok = !results.empty();
  double worst = 0.0;
  std::size_t largest = 0;
  bool end_to_end = false;
  std::string failed;
  for (const auto& r : results) {
    ok = ok && r.passed && r.parameters <= 64;
    worst = std::max(worst, r.rel_error);
    largest = std::max(largest, r.parameters);
    end_to_end = end_to_end || r.name.find("end_to_end") != std::string::npos;
    if (!r.passed) failed += " " + r.name;
  }
  ok = ok && end_to_end && t < 60.0;
  return {ok, std::to_string(results.size()) + " checks, max rel error " + sci(worst) + ", largest " +
                  std::to_string(largest) + " params, " + fmt(t, 2) + " s" + (failed.empty() ? "" : ", failed:" + failed)};
}

// 3 -----------------------------------------------------------------------

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Outcome reduction_identity(const std::vector<LabeledImage>& data) {
  RunConfig c = desk_config();
  c.use_mpm = false;
  const Network net = make_prior_network(c, 0);
  const EpisodeSampler sampler(data, split_classes(c.num_classes, 0).novel_classes, 1, false);
  Rng rng(33);
  double worst = 0.0;
  int used = 0;
  NoGradGuard guard;
  while (used < 20) {
    const Episode ep = sampler.sample(rng);
    const EpisodeOutput mpm = forward_episode(net, ep, std::nullopt, {});
    if (mpm.degenerate) continue;
    const Tensor s = extract_features(ep.supports[0].image, std::nullopt, net.backbone, {});
    const Tensor q = extract_features(ep.query.image, std::nullopt, net.backbone, {});
    const Tensor m = downsample_label(ep.supports[0].mask, s.dim(1), s.dim(2));
    const PredictionMap base =
        baseline_predict(q, masked_average_pool(s, m), masked_average_pool(s, invert_mask(m)), c.gamma);
    worst = std::max(worst, max_abs_diff(mpm.coarse.probs, base.probs));
    worst = std::max(worst, max_abs_diff(mpm.coarse.logits, base.logits));
    ++used;
  }
  return {worst <= 1e-10, "20 episodes, max difference " + sci(worst)};
}

// 4 -----------------------------------------------------------------------

Outcome normalization(const std::vector<LabeledImage>& data) {
  const RunConfig c = desk_config();
  const Pipeline pipeline{make_prior_network(c, 1), make_seg_network(c, 1)};
  const EpisodeSampler sampler(data, split_classes(c.num_classes, 1).novel_classes, 1, false);
  Rng rng(44);
  double prob_err = 0.0, alpha_err = 0.0;
  bool weights_ok = true;
  NoGradGuard guard;
  for (int i = 0; i < 20; ++i) {
    const Episode ep = sampler.sample(rng);
    const EpisodeOutput out = predict_episode(pipeline, ep);
    for (const PredictionMap* p : {&out.coarse, &out.full}) {
      const std::size_t hw = p->height() * p->width();
      for (std::size_t k = 0; k < hw; ++k) prob_err = std::max(prob_err, std::abs(p->probs[k] + p->probs[hw + k] - 1.0));
    }
    const Tensor f = extract_features(ep.supports[0].image, std::nullopt, pipeline.prior.backbone, {});
    const AttentionMaps alpha = mpm_attention(f, pipeline.prior.bank);
    const std::size_t m = alpha.fg.dim(0), hw = alpha.fg.dim(1) * alpha.fg.dim(2);
    for (const Tensor* a : {&alpha.fg, &alpha.bg})
      for (std::size_t k = 0; k < hw; ++k) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += (*a)[j * hw + k];
        alpha_err = std::max(alpha_err, std::abs(s - 1.0));
      }
    const Tensor b = boundary_map(ep.query.mask);
    const Tensor w = weight_map(b, c.sigma);
    for (std::size_t k = 0; k < w.numel(); ++k) {
      weights_ok = weights_ok && w[k] > 1.0 && w[k] <= 2.0 && ((w[k] == 2.0) == (b[k] == 1.0));
    }
  }
  return {prob_err <= 1e-9 && alpha_err <= 1e-9 && weights_ok,
          "prob sum error " + sci(prob_err) + ", alpha sum error " + sci(alpha_err) + ", weight map " +
              (weights_ok ? "in (1,2] with w=2 exactly on B" : "VIOLATED")};
}

// 5 -----------------------------------------------------------------------

Outcome clip_contract() {
  Rng rng(55);
  double worst = 0.0;
  bool untouched = true;
  int clipped = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::vector<double>> bufs(1 + uniform_index(rng, 6));
    const double s = std::exp(uniform(rng, -5.0, 4.0));
    for (auto& b : bufs) {
      b.resize(1 + uniform_index(rng, 50));
      for (auto& v : b) v = s * normal(rng);
    }
    const auto original = bufs;
    std::vector<std::vector<double>*> ptrs;
    for (auto& b : bufs) ptrs.push_back(&b);
    const double pre = clip_global_norm(ptrs, 1.1);
    worst = std::max(worst, global_norm(ptrs));
    if (pre <= 1.1) {
      untouched = untouched && bufs == original;
    } else {
      ++clipped;
    }
  }
  return {worst <= 1.1 + 1e-12 && untouched,
          "1000 sets (" + std::to_string(clipped) + " clipped), max post-clip norm " + fmt(worst, 15) +
              (untouched ? ", small sets untouched" : ", small sets MODIFIED")};
}

// 6-8 ---------------------------------------------------------------------

AblationVariant full_model() {
  AblationVariant v = structure_variants().back();
  v.label = "PEMP";
  return v;
}

AblationVariant prior_only() {
  AblationVariant v = structure_variants()[2];
  v.label = "prior-only";
  return v;
}

std::vector<double> per_seed(const std::vector<AblationRow>& rows, const std::string& label, int shots) {
  std::vector<double> out;
  for (auto seed : kSeeds) {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows)
      if (r.label == label && r.shots == shots && r.seed == seed) {
        s += r.mean_iou;
        ++n;
      }
    out.push_back(n ? s / n : std::nan(""));
  }
  return out;
}

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : "/") + fmt(x, 3);
  return s;
}

struct LearningResults {
  std::vector<AblationRow> rows;
  double seconds_main = 0.0;
};

Outcome desk_learning(const std::vector<AblationRow>& rows, double seconds) {
  const double pemp = average_iou(rows, "PEMP", 1);
  const double base = average_iou(rows, "Baseline", 1);
  const bool ok = pemp >= 0.55 && pemp - base >= 0.02 && seconds < 15 * 60;
  return {ok, "PEMP " + fmt(pemp) + " (seeds " + list(per_seed(rows, "PEMP", 1)) + "), Baseline " + fmt(base) +
                  " (seeds " + list(per_seed(rows, "Baseline", 1)) + "), gain " + fmt(100 * (pemp - base), 2) +
                  " points, " + fmt(seconds, 0) + " s"};
}

Outcome shot_scaling(const std::vector<AblationRow>& rows) {
  const auto one = per_seed(rows, "PEMP", 1), five = per_seed(rows, "PEMP", 5);
  bool ok = true;
  double mean = 0.0;
  std::string deltas;
  for (std::size_t i = 0; i < one.size(); ++i) {
    const double d = 100 * (five[i] - one[i]);
    ok = ok && d >= -0.5;
    mean += d / one.size();
    deltas += (deltas.empty() ? "" : "/") + fmt(d, 2);
  }
  ok = ok && mean >= 0.0;
  return {ok, "5-shot " + fmt(average_iou(rows, "PEMP", 5)) + " vs 1-shot " + fmt(average_iou(rows, "PEMP", 1)) +
                  ", delta per seed " + deltas + " points, mean " + fmt(mean, 2)};
}

Outcome ablation_direction(const std::vector<AblationRow>& rows, const std::vector<AblationRow>& sweep) {
  const double prior = average_iou(rows, "prior-only", 1), two = average_iou(rows, "PEMP", 1);
  std::string sweep_text;
  const double m1 = average_iou(sweep, "M=1", 1);
  bool m1_worst = true;
  for (const char* label : {"M=1", "M=2", "M=3", "M=5"}) {
    const double v = average_iou(sweep, label, 1);
    sweep_text += std::string(sweep_text.empty() ? "" : ", ") + label + " " + fmt(v);
    if (std::string(label) != "M=1") m1_worst = m1_worst && m1 <= v;
  }
  return {prior <= two && m1_worst,
          "prior-only " + fmt(prior) + " vs two-stage " + fmt(two) + "; sweep " + sweep_text};
}

// 9 -----------------------------------------------------------------------

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int run_tool(const std::string& tool, const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + tool + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

Outcome determinism(const std::string& tool) {
  if (tool.empty()) return {false, "path to the pemp tool was not given"};
  const fs::path root = fs::temp_directory_path() / "pemp_acceptance_determinism";
  fs::remove_all(root);
  const std::string flags =
      " --widths 4,8,8,8 --feature_dim 8 --per_class 12 --image_side 32 --episodes_per_epoch 30"
      " --epochs_prior 1 --epochs_seg 1 --eval_episodes 10 --eval_runs 2 --seed 5 --fold 1";
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / run;
    fs::create_directories(dir);
    if (run_tool(tool, "train --out \"" + dir.string() + "\"" + flags, dir / "train.log") != 0 ||
        run_tool(tool, "eval --out \"" + dir.string() + "\" --fold 1", dir / "eval.log") != 0) {
      return {false, std::string("invocation ") + run + " failed, see " + dir.string()};
    }
  }
  std::string mismatched;
  for (const char* name : {"prior.ckpt", "seg.ckpt", "metrics.jsonl", "episodes.jsonl", "config.resolved", "report.txt"}) {
    if (file_bytes(root / "a" / name) != file_bytes(root / "b" / name)) mismatched += std::string(" ") + name;
  }
  // Wall-clock runtime is the one field of the report that legitimately varies.
  auto report = [&](const char* run) {
    auto j = nlohmann::json::parse(file_bytes(root / run / "report.json"));
    j.erase("runtime_seconds");
    return j.dump();
  };
  if (report("a") != report("b")) mismatched += " report.json";
  const bool ok = mismatched.empty() && !file_bytes(root / "a" / "seg.ckpt").empty();
  return {ok, ok ? "two invocations: checkpoints, logs and reports bit-identical (report runtime excluded)"
                 : "differences in" + mismatched};
}

// 10 ----------------------------------------------------------------------

std::string snapshot(const Network& net) {
  std::string out;
  for (const auto& [name, t] : net.named()) out += name + tensor_to_bytes(t);
  return out;
}

Outcome freeze_contract(const std::vector<LabeledImage>& data) {
  RunConfig c = desk_config();
  c.epochs_prior = 1;
  c.epochs_seg = 1;
  c.episodes_per_epoch = 40;
  const FoldSplit split = split_classes(c.num_classes, 2);
  Network prior = make_prior_network(c, 2);
  train_prior_stage(prior, data, split, c);
  const std::string before = snapshot(prior);
  Network seg = make_seg_network(c, 2);
  const std::string seg_before = snapshot(seg);
  train_seg_stage(seg, prior, data, split, c);
  const bool frozen = snapshot(prior) == before;
  const bool trained = snapshot(seg) != seg_before;
  return {frozen && trained, std::to_string(prior.named().size()) + " stage-1 tensors " +
                                 (frozen ? "bit-identical" : "CHANGED") + " after 40 stage-2 steps" +
                                 (trained ? "" : " (stage 2 did not update)")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::string tool = argc > 1 ? argv[1] : "";
  const fs::path report_path = argc > 2 ? fs::path(argv[2]) : fs::path("acceptance_report.txt");
  const auto start = Clock::now();
  const RunConfig base = desk_config();
  const auto data = load_dataset(base);

  int failures = 0;
  std::ostringstream log;
  auto emit = [&](int id, const std::string& name, const Outcome& o) {
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << "  criterion " << std::setw(2) << id << "  " << name << ": " << o.detail;
    std::cout << line.str() << std::endl;
    log << line.str() << "\n";
    if (!o.pass) ++failures;
  };
  auto guarded = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
    try {
      emit(id, name, f());
    } catch (const std::exception& e) {
      emit(id, name, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded(1, "EDT oracle", edt_oracle);
  guarded(2, "gradient suite", gradient_suite);
  guarded(3, "M=1 reduction identity", [&] { return reduction_identity(data); });
  guarded(4, "normalization invariants", [&] { return normalization(data); });
  guarded(5, "clip contract", clip_contract);

  ModelCache cache(data);
  AblationOptions opt;
  opt.seeds = kSeeds;
  std::vector<AblationRow> rows, sweep;
  double main_seconds = 0.0;
  std::string learning_error;
  try {
    const auto t = Clock::now();
    rows = run_ablation(data, base, {baseline_variant(), full_model()}, opt, cache);
    main_seconds = seconds_since(t);
    AblationOptions five = opt;
    five.shots = {5};
    auto r5 = run_ablation(data, base, {full_model()}, five, cache);
    auto rp = run_ablation(data, base, {prior_only()}, opt, cache);
    rows.insert(rows.end(), r5.begin(), r5.end());
    rows.insert(rows.end(), rp.begin(), rp.end());
    sweep = run_ablation(data, base, parse_sweep("M=1,2,3,5"), opt, cache);
  } catch (const std::exception& e) {
    learning_error = e.what();
  }
  auto learning = [&](const std::function<Outcome()>& f) {
    return [&, f] { return learning_error.empty() ? f() : Outcome{false, "training failed: " + learning_error}; };
  };
  guarded(6, "desk-scale learning", learning([&] { return desk_learning(rows, main_seconds); }));
  guarded(7, "shot scaling", learning([&] { return shot_scaling(rows); }));
  guarded(8, "ablation direction", learning([&] { return ablation_direction(rows, sweep); }));
  guarded(9, "determinism", [&] { return determinism(tool); });
  guarded(10, "freeze contract", [&] { return freeze_contract(data); });

  log << "\n" << format_ablation(rows) << format_ablation(sweep);
  log << "\nconfig:\n" << base.to_text() << "trainings " << cache.trainings() << ", total " << fmt(seconds_since(start), 0)
      << " s\n";
  std::ofstream(report_path) << log.str();
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : "all criteria pass") << " ("
            << fmt(seconds_since(start), 0) << " s)" << std::endl;
  return failures ? 1 : 0;
}
