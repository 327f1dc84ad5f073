#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pemp/model.hpp"
#include "pemp/optim.hpp"

namespace pemp {

/// Every hyperparameter of a run. Text form is flat `key=value` lines with
/// `#` comments.
struct RunConfig {
  // Prediction head.
  double gamma = 20.0;
  std::size_t prototypes = 3;
  bool use_mpm = true;  // false forces one prototype per region
  // Loss.
  double sigma = 5.0;
  bool weight_sq_dist = false;
  bool use_weight_map = true;
  // Optimizer.
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double clip_norm = 1.1;
  double lr_prior = 0.001;
  double lr_seg = 0.0035;
  // Schedule.
  std::size_t epochs_prior = 30;
  std::size_t epochs_seg = 30;
  std::size_t episodes_per_epoch = 200;
  bool random_flip = true;
  bool channel_shuffle = false;  // permute RGB per training episode
  // Architecture.
  std::vector<std::size_t> widths{32, 64, 96, 128};
  std::size_t feature_dim = 64;
  double dropout_prior = 0.1;
  double dropout_seg = 0.5;
  bool use_purifier = true;
  bool use_seg_stage = true;
  bool use_comm = true;
  bool comm_masked_mean = false;
  // Episodes and evaluation.
  int shots = 1;
  int fold = 0;
  std::uint64_t seed = 1;
  std::size_t eval_episodes = 200;
  std::size_t eval_runs = 5;
  std::uint64_t eval_seed = 1000;
  // Dataset.
  int num_classes = 12;
  int per_class = 40;
  int image_side = 64;
  std::uint64_t data_seed = 7;
  std::string data_dir;  // external dataset; empty means generate

  std::size_t effective_prototypes() const { return use_mpm ? prototypes : 1; }
  NetworkConfig prior_network() const;
  NetworkConfig seg_network() const;
  SgdConfig sgd(double lr) const;

  /// Sets one key from its text value; throws DataError on unknown keys or
  /// malformed values.
  void set(const std::string& key, const std::string& value);
  void validate() const;

  /// Resolved `key=value` text in a fixed key order.
  std::string to_text() const;
  std::map<std::string, std::string> to_map() const;
  /// 64-bit FNV-1a of to_text(), as 16 hex digits.
  std::string hash() const;

  /// Applies the keys listed in `text` on top of the current values.
  void merge(const std::string& text);
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
};

std::vector<std::string> config_keys();

}  // namespace pemp
