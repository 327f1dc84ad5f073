#include "pemp/model.hpp"

#include "pemp/loss.hpp"

namespace pemp {

Network Network::create(const NetworkConfig& config, std::string prefix, std::uint64_t seed) {
  if (config.prototypes == 0) throw DimensionError("need at least one prototype per region");
  Rng rng(seed);
  Network net;
  net.config = config;
  net.prefix = std::move(prefix);
  net.backbone = BackboneParams::init(config.backbone, rng);
  net.bank = MetaPrototypeBank::init(config.prototypes, config.backbone.output_dim(), rng);
  if (config.backbone.comm_channels) {
    for (std::size_t b = 0; b < config.backbone.widths.size(); ++b) {
      const std::size_t c = config.backbone.block_input_channels(b) - 2;
      net.comm.push_back(config.comm ? CommParams::init(c, rng) : CommParams::zeros(c));
    }
  }
  return net;
}

NamedTensors Network::named() const {
  NamedTensors out = backbone.named(prefix + ".backbone");
  for (auto& entry : bank.named(prefix + ".meta_prototypes")) out.push_back(std::move(entry));
  for (auto& entry : comm_named(comm, prefix + ".comm")) out.push_back(std::move(entry));
  return out;
}

std::vector<Tensor> Network::trainable() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : backbone.named(prefix)) out.push_back(t);
  out.push_back(bank.fg);
  out.push_back(bank.bg);
  if (config.comm) {
    for (const auto& c : comm) {
      out.push_back(c.weight);
      out.push_back(c.bias);
    }
  }
  return out;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : trainable()) n += t.numel();
  return n;
}

void Network::save(const std::filesystem::path& path) const { save_checkpoint(path, named()); }

void Network::load(const std::filesystem::path& path) { assign_from(load_checkpoint(path), named()); }

EpisodeOutput forward_episode(const Network& net, const Episode& episode, const std::optional<Tensor>& query_label,
                              const ForwardContext& ctx) {
  if (episode.supports.empty()) throw DataError("episode has no supports");
  if (net.label_input() != query_label.has_value()) {
    throw DimensionError(net.label_input() ? "segmentation network needs a query pseudo-label"
                                           : "prior network takes no query label");
  }
  std::vector<Tensor> support_features;
  Tensor query_features;
  if (net.backbone.config.comm_channels) {
    std::vector<Branch> branches;
    for (const auto& s : episode.supports) branches.push_back({s.image, s.mask});
    PairedFeatures f = extract_features_with_comm(branches, {episode.query.image, *query_label}, net.backbone,
                                                  net.comm, ctx, net.config.comm_masked_mean);
    support_features = std::move(f.supports);
    query_features = std::move(f.query);
  } else {
    for (const auto& s : episode.supports) {
      std::optional<Tensor> label;
      if (net.label_input()) label = s.mask;
      support_features.push_back(extract_features(s.image, label, net.backbone, ctx));
    }
    query_features = extract_features(episode.query.image, query_label, net.backbone, ctx);
  }

  const std::size_t h = query_features.dim(1), w = query_features.dim(2);
  std::vector<Tensor> masks;
  for (const auto& s : episode.supports) masks.push_back(downsample_label(s.mask, h, w));
  Tensor pooled = pool_supports(support_features);
  Tensor pooled_mask = pool_supports(masks);

  AttentionMaps alpha = mpm_attention(pooled, net.bank);
  PrototypeSet protos = adaptive_prototypes(pooled, pooled_mask, alpha);

  EpisodeOutput out;
  out.degenerate = protos.degenerate;
  out.coarse = fused_predict(query_features, protos, net.config.gamma);
  out.full = upsample_prediction(out.coarse, episode.query.image.dim(1), episode.query.image.dim(2));
  return out;
}

EpisodeOutput predict_episode(const Pipeline& pipeline, const Episode& episode) {
  NoGradGuard guard;
  const ForwardContext ctx{Mode::kEval, nullptr};
  EpisodeOutput prior = forward_episode(pipeline.prior, episode, std::nullopt, ctx);
  if (!pipeline.seg) return prior;
  const Tensor pseudo = binarize_prior(prior.full, episode.query.image.dim(1), episode.query.image.dim(2));
  return forward_episode(*pipeline.seg, episode, pseudo, ctx);
}

Tensor prediction_mask(const PredictionMap& pred) {
  const std::size_t h = pred.height(), w = pred.width();
  std::vector<double> out(h * w);
  auto probs = pred.probs.data();
  for (std::size_t p = 0; p < h * w; ++p) out[p] = probs[p] >= 0.5 ? 1.0 : 0.0;
  return Tensor({1, h, w}, std::move(out));
}

}  // namespace pemp
