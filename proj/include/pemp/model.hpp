#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pemp/comm.hpp"
#include "pemp/data.hpp"
#include "pemp/proto.hpp"

namespace pemp {

struct NetworkConfig {
  BackboneConfig backbone;
  std::size_t prototypes = 3;
  double gamma = 20.0;
  // Communication modules are trained; when false they stay zero and frozen.
  bool comm = false;
  bool comm_masked_mean = false;
};

/// Feature extractor + purifier + meta-prototype bank (+ communication modules
/// for the label-conditioned segmentation network).
struct Network {
  NetworkConfig config;
  std::string prefix;
  BackboneParams backbone;
  MetaPrototypeBank bank;
  std::vector<CommParams> comm;

  static Network create(const NetworkConfig& config, std::string prefix, std::uint64_t seed);

  bool label_input() const { return config.backbone.in_channels == 4; }
  NamedTensors named() const;
  std::vector<Tensor> trainable() const;
  std::size_t parameter_count() const;

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);
};

struct EpisodeOutput {
  PredictionMap coarse;  // feature resolution
  PredictionMap full;    // image resolution
  bool degenerate = false;
};

/// Forward pass for one episode. `query_label` is the query's (pseudo-) label
/// and is required iff the network consumes labels.
EpisodeOutput forward_episode(const Network& net, const Episode& episode, const std::optional<Tensor>& query_label,
                              const ForwardContext& ctx);

/// Prior network, optionally followed by the segmentation network fed with the
/// binarized prior map.
struct Pipeline {
  Network prior;
  std::optional<Network> seg;
};

/// Eval-mode final prediction without recording gradients.
EpisodeOutput predict_episode(const Pipeline& pipeline, const Episode& episode);

/// Binary FG mask (FG prob >= 0.5) at image resolution.
Tensor prediction_mask(const PredictionMap& pred);

}  // namespace pemp
