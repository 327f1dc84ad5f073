#include "pemp/proto.hpp"

namespace pemp {

namespace {

double mask_count(const Tensor& mask) {
  double n = 0.0;
  for (double v : mask.data()) n += v;
  return n;
}

PredictionMap finish_prediction(Tensor logits, std::vector<int> index, std::vector<int> region) {
  PredictionMap pred;
  pred.winner_h = logits.dim(1);
  pred.winner_w = logits.dim(2);
  pred.probs = softmax(logits, 0);
  pred.logits = std::move(logits);
  pred.winner_index = std::move(index);
  pred.winner_region = std::move(region);
  return pred;
}

}  // namespace

MetaPrototypeBank MetaPrototypeBank::init(std::size_t count, std::size_t dim, Rng& rng) {
  if (count == 0 || dim == 0) throw DimensionError("meta-prototype bank needs M >= 1 and d >= 1");
  auto draw = [&] {
    std::vector<double> v(count * dim);
    for (double& x : v) x = normal(rng);
    return Tensor::parameter({count, dim}, std::move(v));
  };
  MetaPrototypeBank bank;
  bank.fg = draw();
  bank.bg = draw();
  return bank;
}

NamedTensors MetaPrototypeBank::named(const std::string& prefix) const {
  return {{prefix + ".fg", fg}, {prefix + ".bg", bg}};
}

Tensor masked_average_pool(const Tensor& features, const Tensor& mask) {
  const double n = mask_count(mask);
  if (n <= 0.0) throw EmptyRegionError("masked_average_pool: mask selects no pixels");
  return spatial_mean(features, mask, n);
}

Tensor invert_mask(const Tensor& mask) {
  std::vector<double> out(mask.data().begin(), mask.data().end());
  for (double& v : out) v = 1.0 - v;
  return Tensor(mask.shape(), std::move(out));
}

PredictionMap baseline_predict(const Tensor& query_features, const Tensor& p_fg, const Tensor& p_bg, double gamma) {
  const std::size_t d = query_features.dim(0);
  Tensor cos_fg = cosine_similarity_map(query_features, reshape(p_fg, {1, d}));
  Tensor cos_bg = cosine_similarity_map(query_features, reshape(p_bg, {1, d}));
  Tensor logits = scale(concat_channels({cos_fg, cos_bg}), gamma);
  const std::size_t hw = query_features.dim(1) * query_features.dim(2);
  std::vector<int> region(hw);
  for (std::size_t p = 0; p < hw; ++p) region[p] = cos_fg.data()[p] >= cos_bg.data()[p] ? 0 : 1;
  return finish_prediction(std::move(logits), std::vector<int>(hw, 0), std::move(region));
}

AttentionMaps mpm_attention(const Tensor& support_features, const MetaPrototypeBank& bank) {
  return {softmax(scale(euclidean_distance_map(support_features, bank.fg), -1.0), 0),
          softmax(scale(euclidean_distance_map(support_features, bank.bg), -1.0), 0)};
}

PrototypeSet adaptive_prototypes(const Tensor& support_features, const Tensor& support_mask,
                                 const AttentionMaps& alpha) {
  const std::size_t d = support_features.dim(0);
  const std::size_t hw = support_features.dim(1) * support_features.dim(2);
  const std::size_t m = alpha.fg.dim(0);
  if (support_mask.shape() != Shape{1, support_features.dim(1), support_features.dim(2)}) {
    throw DimensionError("adaptive_prototypes: mask shape " + shape_str(support_mask.shape()));
  }
  Tensor flat_t = transpose(reshape(support_features, {d, hw}));
  PrototypeSet out;
  auto region = [&](const Tensor& a, const Tensor& mask) {
    const double n = mask_count(mask);
    if (n <= 0.0) {
      out.degenerate = true;
      return Tensor({m, d}, 0.0);
    }
    Tensor weights = reshape(mul_spatial(a, mask), {m, hw});
    return scale(matmul(weights, flat_t), 1.0 / n);
  };
  out.fg = region(alpha.fg, support_mask);
  out.bg = region(alpha.bg, invert_mask(support_mask));
  return out;
}

PredictionMap fused_predict(const Tensor& query_features, const PrototypeSet& protos, double gamma) {
  ArgMax fg = max_over_channels(cosine_similarity_map(query_features, protos.fg));
  ArgMax bg = max_over_channels(cosine_similarity_map(query_features, protos.bg));
  const std::size_t hw = fg.indices.size();
  std::vector<int> index(hw), region(hw);
  for (std::size_t p = 0; p < hw; ++p) {
    const bool fg_wins = fg.values.data()[p] >= bg.values.data()[p];
    region[p] = fg_wins ? 0 : 1;
    index[p] = fg_wins ? fg.indices[p] : bg.indices[p];
  }
  Tensor logits = scale(concat_channels({fg.values, bg.values}), gamma);
  return finish_prediction(std::move(logits), std::move(index), std::move(region));
}

PredictionMap upsample_prediction(const PredictionMap& pred, std::size_t h, std::size_t w) {
  PredictionMap out = pred;
  out.logits = bilinear_resize(pred.logits, h, w);
  out.probs = softmax(out.logits, 0);
  return out;
}

Tensor pool_supports(const std::vector<Tensor>& maps) {
  if (maps.empty()) throw DimensionError("pool_supports: no support maps");
  return maps.size() == 1 ? maps.front() : concat(maps, 2);
}

}  // namespace pemp
