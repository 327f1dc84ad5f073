#include "pemp/comm.hpp"

namespace pemp {

CommParams CommParams::init(std::size_t channels, Rng& rng, double stddev) {
  std::vector<double> w(2 * 2 * channels);
  for (double& v : w) v = stddev * normal(rng);
  return {Tensor::parameter({2, 2 * channels}, std::move(w)), Tensor::parameter({2}, {0.0, 0.0})};
}

CommParams CommParams::zeros(std::size_t channels) {
  return {Tensor::parameter({2, 2 * channels}, std::vector<double>(4 * channels, 0.0)),
          Tensor::parameter({2}, {0.0, 0.0})};
}

RegionStats region_stats(const Tensor& features, const Tensor& label, bool masked_mean) {
  double denom = 0.0;  // h*w
  if (masked_mean) {
    for (double v : label.data()) denom += v;
    if (denom <= 0.0) denom = 1.0;  // all-zero label: the masked sum is zero anyway
  }
  return {spatial_mean(features, label, denom), spatial_max(features, label)};
}

RegionStats average_stats(const std::vector<RegionStats>& stats) {
  if (stats.empty()) throw DimensionError("average_stats: nothing to average");
  if (stats.size() == 1) return stats.front();
  Tensor mean_sum = stats[0].mean, max_sum = stats[0].max;
  for (std::size_t i = 1; i < stats.size(); ++i) {
    mean_sum = add(mean_sum, stats[i].mean);
    max_sum = add(max_sum, stats[i].max);
  }
  const double inv = 1.0 / static_cast<double>(stats.size());
  return {scale(mean_sum, inv), scale(max_sum, inv)};
}

Tensor merge_stats(const RegionStats& support, const RegionStats& query, const CommParams& params) {
  const std::size_t c = support.mean.numel();
  if (params.weight.shape() != Shape{2, 2 * c}) {
    throw DimensionError("comm weight " + shape_str(params.weight.shape()) + " does not fit " +
                         std::to_string(c) + " channels");
  }
  Tensor mean = scale(add(support.mean, query.mean), 0.5);
  Tensor max = scale(add(support.max, query.max), 0.5);
  Tensor merged = reshape(concat({mean, max}, 0), {2 * c, 1});
  return add(reshape(matmul(params.weight, merged), {2}), params.bias);
}

std::pair<Tensor, Tensor> merge_distribute(const RegionStats& support, const RegionStats& query,
                                           const CommParams& params, const Tensor& features_s,
                                           const Tensor& features_q) {
  if (features_s.rank() != 3 || features_q.rank() != 3 || features_s.dim(1) != features_q.dim(1) ||
      features_s.dim(2) != features_q.dim(2)) {
    throw DimensionError("merge_distribute: branch resolutions differ " + shape_str(features_s.shape()) +
                         " vs " + shape_str(features_q.shape()));
  }
  Tensor u = merge_stats(support, query, params);
  const std::size_t h = features_s.dim(1), w = features_s.dim(2);
  Tensor plane = broadcast_spatial(u, h, w);
  return {concat_channels({features_s, plane}), concat_channels({features_q, plane})};
}

PairedFeatures extract_features_with_comm(const std::vector<Branch>& supports, const Branch& query,
                                          const BackboneParams& backbone, const std::vector<CommParams>& comm,
                                          const ForwardContext& ctx, bool masked_mean) {
  if (!backbone.config.comm_channels) throw DimensionError("backbone was not built with communication channels");
  if (comm.size() != backbone.blocks.size()) throw DimensionError("need one communication module per block");
  if (supports.empty()) throw DimensionError("at least one support branch is required");

  std::vector<Tensor> xs;
  for (const auto& s : supports) xs.push_back(backbone_input(s.image, s.label, backbone.config));
  Tensor xq = backbone_input(query.image, query.label, backbone.config);

  for (std::size_t b = 0; b < backbone.blocks.size(); ++b) {
    const std::size_t h = xq.dim(1), w = xq.dim(2);
    std::vector<RegionStats> support_stats;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (xs[k].dim(1) != h || xs[k].dim(2) != w) throw DimensionError("support and query resolutions differ");
      support_stats.push_back(region_stats(xs[k], downsample_label(supports[k].label, h, w), masked_mean));
    }
    const RegionStats merged_support = average_stats(support_stats);
    const RegionStats query_stats = region_stats(xq, downsample_label(query.label, h, w), masked_mean);

    Tensor u = merge_stats(merged_support, query_stats, comm[b]);
    Tensor plane = broadcast_spatial(u, h, w);
    for (auto& x : xs) x = apply_block(backbone.blocks[b], concat_channels({x, plane}), b);
    xq = apply_block(backbone.blocks[b], concat_channels({xq, plane}), b);
  }

  PairedFeatures out;
  for (auto& x : xs) out.supports.push_back(apply_purifier(backbone.purifier, backbone.config, x, ctx));
  out.query = apply_purifier(backbone.purifier, backbone.config, xq, ctx);
  return out;
}

NamedTensors comm_named(const std::vector<CommParams>& comm, const std::string& prefix) {
  NamedTensors out;
  for (std::size_t i = 0; i < comm.size(); ++i) {
    const std::string name = prefix + ".block" + std::to_string(i + 1);
    out.emplace_back(name + ".weight", comm[i].weight);
    out.emplace_back(name + ".bias", comm[i].bias);
  }
  return out;
}

}  // namespace pemp
