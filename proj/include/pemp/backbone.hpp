#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pemp/ops.hpp"
#include "pemp/rng.hpp"
#include "pemp/serialize.hpp"

namespace pemp {

struct BackboneConfig {
  std::size_t in_channels = 3;  // 3 for the prior network, 4 with a label channel
  std::vector<std::size_t> widths{32, 64, 96, 128};
  std::size_t feature_dim = 64;
  std::vector<std::size_t> aspp_dilations{1, 2, 4};
  double dropout = 0.1;
  // Each block input gains two channels appended by a communication module.
  bool comm_channels = false;
  // Without the purifier the last block's activations are the features.
  bool purifier = true;

  std::size_t output_dim() const { return purifier ? feature_dim : widths.back(); }

  std::size_t block_input_channels(std::size_t block) const;
};

struct ConvParams {
  Tensor kernel;  // [out, in, k, k]
  Tensor bias;    // [out]
};

struct BlockParams {
  ConvParams conv1;
  ConvParams conv2;
};

struct PurifierParams {
  ConvParams reduce;             // 1x1, backbone width -> d
  ConvParams smooth;             // 3x3, d -> d
  std::vector<ConvParams> aspp;  // 3x3 dilated, d -> d each
  ConvParams project;            // 1x1, |aspp|*d -> d
};

struct BackboneParams {
  BackboneConfig config;
  std::vector<BlockParams> blocks;
  PurifierParams purifier;

  /// He-normal kernels, zero biases.
  static BackboneParams init(const BackboneConfig& config, Rng& rng);
  static BackboneParams zeros(const BackboneConfig& config);

  NamedTensors named(const std::string& prefix) const;
  std::size_t parameter_count() const;
};

/// Spatial downsampling applied after this block (total stride 4).
bool block_downsamples(std::size_t block);

Tensor backbone_input(const Tensor& image, const std::optional<Tensor>& label, const BackboneConfig& config);
Tensor apply_block(const BlockParams& block, const Tensor& x, std::size_t index);
Tensor apply_purifier(const PurifierParams& purifier, const BackboneConfig& config, const Tensor& x,
                      const ForwardContext& ctx);

/// image [3,H,W], optional binary label [1,H,W] -> features [d,H/4,W/4].
/// Reserved communication channels, if any, are filled with zeros.
Tensor extract_features(const Tensor& image, const std::optional<Tensor>& label, const BackboneParams& params,
                        const ForwardContext& ctx);

/// Bilinear resize followed by a >= 0.5 threshold.
Tensor downsample_label(const Tensor& label, std::size_t h, std::size_t w);

}  // namespace pemp
