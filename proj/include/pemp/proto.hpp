#pragma once

#include <string>
#include <vector>

#include "pemp/ops.hpp"
#include "pemp/rng.hpp"
#include "pemp/serialize.hpp"

namespace pemp {

/// Raised when a region selects no pixels.
class EmptyRegionError : public DataError {
 public:
  using DataError::DataError;
};

/// Learned class-agnostic prototypes, M per region, each of dimension d.
struct MetaPrototypeBank {
  Tensor fg;  // [M,d]
  Tensor bg;  // [M,d]

  static MetaPrototypeBank init(std::size_t count, std::size_t dim, Rng& rng);
  std::size_t count() const { return fg.dim(0); }
  std::size_t dim() const { return fg.dim(1); }
  NamedTensors named(const std::string& prefix) const;
};

struct PrototypeSet {
  Tensor fg;  // [M,d]
  Tensor bg;  // [M,d]
  bool degenerate = false;  // a region was empty and got zero prototypes
};

/// Per-region attention over meta-prototypes, each [M,h,w], summing to 1 over M.
struct AttentionMaps {
  Tensor fg;
  Tensor bg;
};

enum class Region : int { kForeground = 0, kBackground = 1 };

/// FG/BG probabilities plus, per pixel, which prototype won the max for the
/// winning region. Winner maps live at feature resolution.
struct PredictionMap {
  Tensor logits;  // [2,H,W] gamma-scaled scores (FG, BG)
  Tensor probs;   // [2,H,W]
  std::size_t winner_h = 0;
  std::size_t winner_w = 0;
  std::vector<int> winner_index;
  std::vector<int> winner_region;

  std::size_t height() const { return probs.dim(1); }
  std::size_t width() const { return probs.dim(2); }
  double fg_prob(std::size_t y, std::size_t x) const { return probs.at(0, y, x); }
};

/// Mean feature over pixels where mask == 1. Throws EmptyRegionError.
Tensor masked_average_pool(const Tensor& features, const Tensor& mask);

/// Complement of a binary mask.
Tensor invert_mask(const Tensor& mask);

/// Cosine-softmax predictor with one prototype per region.
PredictionMap baseline_predict(const Tensor& query_features, const Tensor& p_fg, const Tensor& p_bg, double gamma);

/// alpha[r][m,i] = softmax over m of -||h_i - q_m^r||.
AttentionMaps mpm_attention(const Tensor& support_features, const MetaPrototypeBank& bank);

/// p_m^r = mean over region pixels of feature_i * alpha[r][m,i]. Empty regions
/// yield zero prototypes and set `degenerate`.
PrototypeSet adaptive_prototypes(const Tensor& support_features, const Tensor& support_mask,
                                 const AttentionMaps& alpha);

/// s_r = max_m cos(h_i, p_m^r); probs = softmax_r(gamma * s_r).
PredictionMap fused_predict(const Tensor& query_features, const PrototypeSet& protos, double gamma);

/// Bilinearly resizes the logits and recomputes the probabilities.
PredictionMap upsample_prediction(const PredictionMap& pred, std::size_t h, std::size_t w);

/// Joins K support feature maps [d,h,w] (and masks) side by side along width so
/// they form one pooled index set.
Tensor pool_supports(const std::vector<Tensor>& maps);

}  // namespace pemp
