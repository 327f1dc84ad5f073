#include "pemp/ablate.hpp"

#include <algorithm>
#include <atomic>
#include <iomanip>
#include <sstream>
#include <thread>

namespace pemp {

namespace {

RunConfig stage1_view(RunConfig c, int fold) {
  const RunConfig defaults;
  c.lr_seg = defaults.lr_seg;
  c.epochs_seg = defaults.epochs_seg;
  c.dropout_seg = defaults.dropout_seg;
  c.use_seg_stage = defaults.use_seg_stage;
  c.use_comm = defaults.use_comm;
  c.comm_masked_mean = defaults.comm_masked_mean;
  c.eval_episodes = defaults.eval_episodes;
  c.eval_runs = defaults.eval_runs;
  c.eval_seed = defaults.eval_seed;
  c.fold = fold;
  return c;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

std::string prior_key(const RunConfig& config, int fold) { return stage1_view(config, fold).hash(); }

std::string pipeline_key(const RunConfig& config, int fold) {
  RunConfig c = config;
  const RunConfig defaults;
  c.eval_episodes = defaults.eval_episodes;
  c.eval_runs = defaults.eval_runs;
  c.eval_seed = defaults.eval_seed;
  c.fold = fold;
  if (!c.use_seg_stage) return prior_key(config, fold);
  return "seg-" + c.hash();
}

std::shared_ptr<ModelCache::Entry> ModelCache::entry(const std::string& key) {
  std::lock_guard<std::mutex> lock(mutex_);
  auto& e = entries_[key];
  if (!e) e = std::make_shared<Entry>();
  return e;
}

const Pipeline& ModelCache::get(const RunConfig& config, int fold) {
  config.validate();
  const FoldSplit split = split_classes(config.num_classes, fold);
  auto prior = entry(prior_key(config, fold));
  std::call_once(prior->once, [&] {
    prior->pipeline.prior = make_prior_network(config, fold);
    train_prior_stage(prior->pipeline.prior, *data_, split, config);
    ++trainings_;
  });
  if (!config.use_seg_stage) return prior->pipeline;
  auto full = entry(pipeline_key(config, fold));
  std::call_once(full->once, [&] {
    Network seg = make_seg_network(config, fold);
    train_seg_stage(seg, prior->pipeline.prior, *data_, split, config);
    ++trainings_;
    full->pipeline.prior = prior->pipeline.prior;
    full->pipeline.seg = std::move(seg);
  });
  return full->pipeline;
}

AblationVariant baseline_variant() {
  return {"Baseline", [](RunConfig& c) {
            c.use_purifier = false;
            c.use_mpm = false;
            c.use_seg_stage = false;
          }};
}

std::vector<AblationVariant> structure_variants() {
  auto variant = [](std::string label, bool seg, bool mpm, bool comm) {
    return AblationVariant{std::move(label), [=](RunConfig& c) {
                             c.use_purifier = true;
                             c.use_seg_stage = seg;
                             c.use_mpm = mpm;
                             c.use_comm = comm;
                           }};
  };
  return {baseline_variant(),
          variant("PN", false, false, false),
          variant("PN+MP", false, true, false),
          variant("PN+SN", true, false, false),
          variant("PN+SN+MP", true, true, false),
          variant("PN+SN+MP+CM", true, true, true)};
}

std::vector<AblationVariant> parse_sweep(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw DataError("sweep must look like NAME=v1,v2,...: '" + text + "'");
  const std::string name = text.substr(0, eq);
  const auto values = split_list(text.substr(eq + 1));
  if (values.empty()) throw DataError("sweep '" + text + "' lists no values");
  std::vector<AblationVariant> out;
  for (const auto& v : values) {
    if (name == "M") {
      RunConfig probe;
      probe.set("prototypes", v);
      out.push_back({"M=" + v, [v](RunConfig& c) {
                       c.set("prototypes", v);
                       c.use_mpm = true;
                       c.use_seg_stage = false;
                     }});
    } else if (name == "sigma") {
      RunConfig probe;
      probe.set("sigma", v);
      out.push_back({"sigma=" + v, [v](RunConfig& c) { c.set("sigma", v); }});
    } else {
      throw DataError("unknown sweep axis '" + name + "' (expected M or sigma)");
    }
  }
  return out;
}

void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, count));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < count && !failed; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

std::vector<AblationRow> run_ablation(const std::vector<LabeledImage>& data, const RunConfig& base,
                                      const std::vector<AblationVariant>& variants, const AblationOptions& options,
                                      ModelCache& cache) {
  struct Job {
    const AblationVariant* variant;
    int fold;
    std::uint64_t seed;
    int shots;
  };
  std::vector<Job> jobs;
  for (const auto& v : variants)
    for (int fold : options.folds)
      for (auto seed : options.seeds)
        for (int shots : options.shots) jobs.push_back({&v, fold, seed, shots});

  std::vector<AblationRow> rows(jobs.size());
  parallel_for(jobs.size(), options.threads ? options.threads : eval_threads(), [&](std::size_t i) {
    const Job& job = jobs[i];
    RunConfig c = base;
    c.seed = job.seed;
    c.fold = job.fold;
    job.variant->apply(c);
    const Pipeline& pipeline = cache.get(c, job.fold);
    ProtocolOptions opt;
    opt.shots = job.shots;
    opt.episodes = c.eval_episodes;
    opt.runs = c.eval_runs;
    opt.seed = c.eval_seed;
    opt.threads = 1;
    const ProtocolResult r =
        evaluate_protocol(data, split_classes(c.num_classes, job.fold), opt, pipeline_predictor(pipeline));
    rows[i] = {job.variant->label, job.fold, job.seed, job.shots, r.mean_iou, r.binary_iou};
  });
  return rows;
}

double average_iou(const std::vector<AblationRow>& rows, const std::string& label, int shots) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.label == label && (shots < 1 || r.shots == shots)) {
      s += r.mean_iou;
      ++n;
    }
  }
  if (!n) throw DataError("no ablation rows for '" + label + "'");
  return s / static_cast<double>(n);
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::vector<std::pair<std::string, int>> keys;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.label, r.shots);
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  std::size_t width = 7;
  for (const auto& k : keys) width = std::max(width, k.first.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(width)) << "Variant" << "  Shot  mean-IoU  binary-IoU\n";
  for (const auto& [label, shots] : keys) {
    double m = 0.0, b = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.label == label && r.shots == shots) {
        m += r.mean_iou;
        b += r.binary_iou;
        ++n;
      }
    }
    os << std::left << std::setw(static_cast<int>(width)) << label << "  " << std::right << std::setw(4) << shots
       << std::fixed << std::setprecision(2) << "  " << std::setw(8) << 100.0 * m / n << "  " << std::setw(10)
       << 100.0 * b / n << "\n";
  }
  return os.str();
}

}  // namespace pemp
