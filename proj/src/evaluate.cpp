#include "pemp/evaluate.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "pemp/metrics.hpp"

namespace pemp {

Predictor pipeline_predictor(const Pipeline& pipeline) {
  return [&pipeline](const Episode& ep) { return prediction_mask(predict_episode(pipeline, ep).full); };
}

Predictor oracle_predictor() {
  return [](const Episode& ep) { return ep.query.mask; };
}

std::size_t eval_threads() {
  if (const char* env = std::getenv("PEMP_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double population_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

ProtocolResult evaluate_protocol(const std::vector<LabeledImage>& data, const FoldSplit& split,
                                 const ProtocolOptions& options, const Predictor& predict) {
  if (options.runs < 1) throw DataError("evaluation needs at least one run");
  if (options.episodes < split.novel_classes.size()) {
    throw DataError("evaluation needs at least one episode per novel class");
  }
  const auto start = std::chrono::steady_clock::now();
  const EpisodeSampler sampler(data, split.novel_classes, options.shots, false);
  const std::size_t classes = sampler.pool().size();
  const std::size_t threads = std::min(options.threads ? options.threads : eval_threads(), options.episodes);

  struct Outcome {
    int class_id = 0;
    IouCounts fg;
    IouCounts bg;
  };

  ProtocolResult result;
  std::vector<double> means;
  std::vector<double> binaries;
  for (std::size_t run = 0; run < options.runs; ++run) {
    const std::uint64_t run_seed = derive_seed(options.seed, run);
    std::vector<Outcome> outcomes(options.episodes);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    auto work = [&] {
      try {
        for (std::size_t i = next++; i < options.episodes && !failed; i = next++) {
          Rng rng(derive_seed(run_seed, i));
          const Episode ep = sampler.sample_slot(rng, i % classes);
          const Tensor pred = predict(ep);
          Outcome& o = outcomes[i];
          o.class_id = ep.class_id;
          o.fg = iou_counts(pred, ep.query.mask);
          const double total = static_cast<double>(pred.numel());
          o.bg.intersection = total - o.fg.union_;
          o.bg.union_ = total - o.fg.intersection;
        }
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    };
    if (threads <= 1) {
      work();
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
      for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);

    IouAccumulator acc;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      const Outcome& o = outcomes[i];
      acc.add_counts(o.class_id, o.fg, o.bg);
      result.episodes.push_back({run, i, o.class_id, o.fg.value()});
    }
    RunMetrics rm;
    rm.seed = run_seed;
    rm.mean_iou = acc.mean_iou(sampler.pool());
    rm.binary_iou = acc.binary_iou();
    rm.per_class = acc.per_class();
    means.push_back(rm.mean_iou);
    binaries.push_back(rm.binary_iou);
    for (const auto& [c, v] : rm.per_class) result.per_class[c] += v / static_cast<double>(options.runs);
    result.runs.push_back(std::move(rm));
  }
  result.mean_iou = mean_of(means);
  result.mean_iou_std = population_std(means);
  result.binary_iou = mean_of(binaries);
  result.binary_iou_std = population_std(binaries);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

Pipeline load_pipeline(const RunConfig& config, const std::filesystem::path& dir) {
  const auto prior_path = dir / "prior.ckpt";
  if (!std::filesystem::exists(prior_path)) throw IoError("missing checkpoint file: " + prior_path.string());
  Pipeline p{Network::create(config.prior_network(), "prior", 0), std::nullopt};
  p.prior.load(prior_path);
  if (config.use_seg_stage) {
    const auto seg_path = dir / "seg.ckpt";
    if (!std::filesystem::exists(seg_path)) throw IoError("missing checkpoint file: " + seg_path.string());
    Network seg = Network::create(config.seg_network(), "seg", 0);
    seg.load(seg_path);
    p.seg = std::move(seg);
  }
  return p;
}

void save_pipeline(const Pipeline& pipeline, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  pipeline.prior.save(dir / "prior.ckpt");
  if (pipeline.seg) pipeline.seg->save(dir / "seg.ckpt");
}

}  // namespace pemp
