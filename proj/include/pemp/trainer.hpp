#pragma once

#include <functional>
#include <string>
#include <vector>

#include "pemp/config.hpp"
#include "pemp/data.hpp"
#include "pemp/model.hpp"

namespace pemp {

struct TrainLogRecord {
  std::size_t step = 0;
  std::string stage;
  int class_id = 0;
  double loss = 0.0;
  double grad_norm_preclip = 0.0;
};

using LogSink = std::function<void(const TrainLogRecord&)>;

std::string to_jsonl(const TrainLogRecord& record);

struct StageReport {
  std::vector<double> losses;
  std::size_t skipped_steps = 0;
  double seconds = 0.0;
};

/// Loss at step `end` smoothed over the preceding `window` steps.
double smoothed_loss(const std::vector<double>& losses, std::size_t end, std::size_t window);

/// Generates the configured synthetic dataset, or ingests `data_dir`.
std::vector<LabeledImage> load_dataset(const RunConfig& config);

/// Stage 1: trains the prior network on base-class episodes.
StageReport train_prior_stage(Network& prior, const std::vector<LabeledImage>& data, const FoldSplit& split,
                              const RunConfig& config, const LogSink& log = {});

/// Stage 2: trains the segmentation network on pseudo-labels from the frozen
/// prior network.
StageReport train_seg_stage(Network& seg, const Network& prior, const std::vector<LabeledImage>& data,
                            const FoldSplit& split, const RunConfig& config, const LogSink& log = {});

struct TwoStageResult {
  Pipeline pipeline;
  StageReport prior;
  StageReport seg;
};

/// Both stages (the second only when config.use_seg_stage).
TwoStageResult train_two_stage(const std::vector<LabeledImage>& data, int fold, const RunConfig& config,
                               const LogSink& log = {});

Network make_prior_network(const RunConfig& config, int fold);
Network make_seg_network(const RunConfig& config, int fold);

}  // namespace pemp
