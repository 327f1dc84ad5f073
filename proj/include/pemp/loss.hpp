#pragma once

#include "pemp/proto.hpp"

namespace pemp {

/// Distance reported everywhere when the feature set is empty.
inline constexpr double kEdtSentinel = 1.0e6;

/// Object-side boundary: label==1 with a 4-neighbour that is 0 or outside.
Tensor boundary_map(const Tensor& label);

/// Exact Euclidean distance from every pixel to the nearest nonzero pixel of
/// `features` [1,H,W] (separable lower-envelope transform on squared distances).
Tensor edt(const Tensor& features);

/// w = exp(-dist/sigma^2) + 1 where dist is the distance to the nearest
/// boundary pixel (dist^2 when `squared_distance`).
Tensor weight_map(const Tensor& boundary, double sigma, bool squared_distance = false);

/// Boundary-weighted binary cross-entropy on the foreground probability map
/// [1,H,W]; see ops for the clamp.
Tensor weighted_bce(const Tensor& fg_prob, const Tensor& target, const Tensor& weight);

/// Convenience: weighted_bce on channel 0 of a prediction.
Tensor prediction_loss(const PredictionMap& pred, const Tensor& target, const Tensor& weight);

/// FG >= 0.5 -> 1, then resized to (h, w) with a bilinear pass and a second
/// threshold when the resolution differs.
Tensor binarize_prior(const PredictionMap& prior, std::size_t h, std::size_t w);

}  // namespace pemp
