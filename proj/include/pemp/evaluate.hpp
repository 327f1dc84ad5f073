#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include "pemp/config.hpp"
#include "pemp/data.hpp"
#include "pemp/model.hpp"

namespace pemp {

/// Binary query mask [1,H,W] for an episode. Called concurrently.
using Predictor = std::function<Tensor(const Episode&)>;

Predictor pipeline_predictor(const Pipeline& pipeline);
/// Returns the ground-truth query mask.
Predictor oracle_predictor();

struct ProtocolOptions {
  int shots = 1;
  std::size_t episodes = 200;
  std::size_t runs = 5;
  std::uint64_t seed = 1000;
  std::size_t threads = 0;  // 0: PEMP_THREADS or the hardware count
};

struct RunMetrics {
  std::uint64_t seed = 0;
  double mean_iou = 0.0;
  double binary_iou = 0.0;
  std::map<int, double> per_class;
};

struct EpisodeRecord {
  std::size_t run = 0;
  std::size_t episode = 0;
  int class_id = 0;
  double iou = 0.0;
};

struct ProtocolResult {
  std::vector<RunMetrics> runs;
  std::vector<EpisodeRecord> episodes;
  double mean_iou = 0.0;
  double mean_iou_std = 0.0;
  double binary_iou = 0.0;
  double binary_iou_std = 0.0;
  std::map<int, double> per_class;  // averaged over runs
  double seconds = 0.0;
};

std::size_t eval_threads();

/// Runs `runs` independent test runs of `episodes` novel-class episodes.
/// Classes are visited round-robin; each episode draws from its own seed so
/// the result does not depend on the thread count.
ProtocolResult evaluate_protocol(const std::vector<LabeledImage>& data, const FoldSplit& split,
                                 const ProtocolOptions& options, const Predictor& predict);

double mean_of(const std::vector<double>& v);
/// Population standard deviation (0 for a single value).
double population_std(const std::vector<double>& v);

/// Loads prior.ckpt (and seg.ckpt when the config uses the second stage) from
/// `dir`. Throws IoError naming the missing file.
Pipeline load_pipeline(const RunConfig& config, const std::filesystem::path& dir);
void save_pipeline(const Pipeline& pipeline, const std::filesystem::path& dir);

}  // namespace pemp
