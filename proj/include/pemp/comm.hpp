#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pemp/backbone.hpp"

namespace pemp {

/// Masked spatial statistics of one branch, each [c].
struct RegionStats {
  Tensor mean;
  Tensor max;
};

/// Linear map from the merged [mean, max] statistics (2c) to two scalars.
struct CommParams {
  Tensor weight;  // [2, 2c]
  Tensor bias;    // [2]

  static CommParams init(std::size_t channels, Rng& rng, double stddev = 0.01);
  static CommParams zeros(std::size_t channels);
  std::size_t channels() const { return weight.dim(1) / 2; }
};

/// mean = sum(h*y)/(h*w) (or /sum(y) when `masked_mean`), max = max(h*y).
RegionStats region_stats(const Tensor& features, const Tensor& label, bool masked_mean = false);

/// Elementwise average of several branches' statistics.
RegionStats average_stats(const std::vector<RegionStats>& stats);

/// u = W [ (mean_s+mean_q)/2, (max_s+max_q)/2 ] + b, shape [2].
Tensor merge_stats(const RegionStats& support, const RegionStats& query, const CommParams& params);

/// Appends u, broadcast spatially, as two extra channels to both branches.
std::pair<Tensor, Tensor> merge_distribute(const RegionStats& support, const RegionStats& query,
                                           const CommParams& params, const Tensor& features_s,
                                           const Tensor& features_q);

/// Image plus (pseudo-) label for one branch.
struct Branch {
  Tensor image;
  Tensor label;
};

struct PairedFeatures {
  std::vector<Tensor> supports;  // [d,H/4,W/4] each
  Tensor query;
};

/// Runs all branches block by block with a communication module before every
/// block. Support statistics of K shots are averaged before merging.
PairedFeatures extract_features_with_comm(const std::vector<Branch>& supports, const Branch& query,
                                          const BackboneParams& backbone, const std::vector<CommParams>& comm,
                                          const ForwardContext& ctx, bool masked_mean = false);

NamedTensors comm_named(const std::vector<CommParams>& comm, const std::string& prefix);

}  // namespace pemp
