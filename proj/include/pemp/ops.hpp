#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "pemp/tensor.hpp"

namespace pemp {

enum class Mode { kTrain, kEval };

/// Per-forward state. Dropout reads the mode and draws from `rng`.
struct ForwardContext {
  Mode mode = Mode::kEval;
  std::mt19937_64* rng = nullptr;

  bool training() const { return mode == Mode::kTrain; }
};

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
};

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);  // rank 2
Tensor matmul(const Tensor& a, const Tensor& b);

/// input [C_in,H,W], kernel [C_out,C_in,k,k], optional bias [C_out].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = {},
              Conv2dOptions opt = {});
std::size_t conv_output_size(std::size_t in, std::size_t k, const Conv2dOptions& opt);

/// 2x2 average pooling with stride 2 over [C,H,W]; H and W must be even.
Tensor avg_pool2(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end);

/// Numerically stable softmax along `axis` (max-shifted).
Tensor softmax(const Tensor& x, std::size_t axis);

struct ArgMax {
  Tensor values;             // [1,h,w]
  std::vector<int> indices;  // h*w, lowest index wins ties
};
/// Max over the leading axis of [M,h,w].
ArgMax max_over_channels(const Tensor& x);

/// x [c,h,w] times m [1,h,w], broadcast over channels.
Tensor mul_spatial(const Tensor& x, const Tensor& m);
/// v [c] -> [c,h,w].
Tensor broadcast_spatial(const Tensor& v, std::size_t h, std::size_t w);

/// Sum over pixels of x*mask divided by `denom` ([c,h,w] -> [c]). Without a
/// mask all pixels count. denom <= 0 selects h*w.
Tensor spatial_mean(const Tensor& x, const Tensor& mask = {}, double denom = 0.0);
/// Channelwise max over pixels of x*mask ([c,h,w] -> [c]).
Tensor spatial_max(const Tensor& x, const Tensor& mask = {});

/// features [d,h,w], protos [M,d] -> [M,h,w] cosine similarity. Zero-norm
/// vectors give similarity 0.
Tensor cosine_similarity_map(const Tensor& features, const Tensor& protos);
/// features [d,h,w], protos [M,d] -> [M,h,w] Euclidean distance.
Tensor euclidean_distance_map(const Tensor& features, const Tensor& protos);

/// Half-pixel-centred bilinear resize of [C,H,W] to [C,out_h,out_w].
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

/// Zeroes whole channels with probability `rate` and rescales survivors by
/// 1/(1-rate). Identity in eval mode.
Tensor dropout_channels(const Tensor& x, double rate, const ForwardContext& ctx);

}  // namespace pemp
