#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "pemp/config.hpp"
#include "pemp/evaluate.hpp"
#include "pemp/trainer.hpp"

namespace pemp {

/// Trains pipelines on demand and shares them between requests. Prior
/// networks are keyed on the stage-1 settings only, so variants that differ
/// in the second stage reuse one prior network. Safe to call concurrently.
class ModelCache {
 public:
  explicit ModelCache(const std::vector<LabeledImage>& data) : data_(&data) {}

  const Pipeline& get(const RunConfig& config, int fold);
  std::size_t trainings() const { return trainings_; }

 private:
  struct Entry {
    std::once_flag once;
    Pipeline pipeline;
  };
  std::shared_ptr<Entry> entry(const std::string& key);

  const std::vector<LabeledImage>* data_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Entry>> entries_;
  std::atomic<std::size_t> trainings_{0};
};

/// Hash of the settings that determine stage-1 training.
std::string prior_key(const RunConfig& config, int fold);
std::string pipeline_key(const RunConfig& config, int fold);

struct AblationVariant {
  std::string label;
  std::function<void(RunConfig&)> apply;
};

/// Baseline, PN, PN+MP, PN+SN, PN+SN+MP, PN+SN+MP+CM.
std::vector<AblationVariant> structure_variants();
AblationVariant baseline_variant();
/// "M=1,2,3,5" or "sigma=2,5,10". M sweeps run on the prior network.
std::vector<AblationVariant> parse_sweep(const std::string& text);

struct AblationOptions {
  std::vector<int> folds{0, 1, 2, 3};
  std::vector<std::uint64_t> seeds{1};
  std::vector<int> shots{1};
  std::size_t threads = 0;  // 0: eval_threads()
};

struct AblationRow {
  std::string label;
  int fold = 0;
  std::uint64_t seed = 0;
  int shots = 1;
  double mean_iou = 0.0;
  double binary_iou = 0.0;
};

/// Evaluates every (variant, fold, seed, shots) combination. Independent
/// jobs run in parallel; results are ordered as the loops are nested.
std::vector<AblationRow> run_ablation(const std::vector<LabeledImage>& data, const RunConfig& base,
                                      const std::vector<AblationVariant>& variants, const AblationOptions& options,
                                      ModelCache& cache);

/// Mean of `mean_iou` over rows matching label (and shots, when >= 1).
double average_iou(const std::vector<AblationRow>& rows, const std::string& label, int shots = 0);
/// One line per (label, shots): mean over folds and seeds.
std::string format_ablation(const std::vector<AblationRow>& rows);

/// Runs `jobs` on up to `threads` workers, rethrowing the first failure.
void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& job);

}  // namespace pemp
