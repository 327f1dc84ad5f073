#include "pemp/trainer.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>

#include "pemp/loss.hpp"

namespace pemp {

namespace {

enum class Stage : std::uint64_t { kPrior = 1, kSeg = 2 };

const char* stage_name(Stage s) { return s == Stage::kPrior ? "prior" : "seg"; }

// One random RGB permutation shared by every image of the episode.
void shuffle_channels(Episode& ep, Rng& rng) {
  std::array<std::size_t, 3> perm{0, 1, 2};
  for (std::size_t i = 2; i > 0; --i) std::swap(perm[i], perm[uniform_index(rng, i + 1)]);
  auto apply = [&perm](LabeledImage& item) {
    const auto src = item.image.data();
    const std::size_t hw = src.size() / 3;
    std::vector<double> out(src.size());
    for (std::size_t c = 0; c < 3; ++c) std::copy_n(src.begin() + perm[c] * hw, hw, out.begin() + c * hw);
    item.image = Tensor(item.image.shape(), std::move(out));
  };
  for (auto& s : ep.supports) apply(s);
  apply(ep.query);
}

Tensor loss_weight(const Tensor& mask, const RunConfig& config) {
  if (!config.use_weight_map) return Tensor(mask.shape(), 1.0);
  return weight_map(boundary_map(mask), config.sigma, config.weight_sq_dist);
}

StageReport run_stage(Stage stage, Network& net, const Network* prior, const std::vector<LabeledImage>& data,
                      const FoldSplit& split, const RunConfig& config, const LogSink& log) {
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t tag = static_cast<std::uint64_t>(stage);
  Rng episode_rng(derive_seed(config.seed, 10 + tag, static_cast<std::uint64_t>(split.fold)));
  Rng dropout_rng(derive_seed(config.seed, 20 + tag, static_cast<std::uint64_t>(split.fold)));
  EpisodeSampler sampler(data, split.base_classes, config.shots, config.random_flip);
  SgdOptimizer opt(net.trainable(), config.sgd(stage == Stage::kPrior ? config.lr_prior : config.lr_seg));
  const std::size_t epochs = stage == Stage::kPrior ? config.epochs_prior : config.epochs_seg;
  const std::size_t total = epochs * config.episodes_per_epoch;

  StageReport report;
  report.losses.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    Episode ep = sampler.sample(episode_rng);
    if (config.channel_shuffle) shuffle_channels(ep, episode_rng);
    std::optional<Tensor> pseudo;
    if (prior) {
      pseudo = binarize_prior(predict_episode(Pipeline{*prior, std::nullopt}, ep).full, ep.query.image.dim(1),
                              ep.query.image.dim(2));
    }
    const ForwardContext ctx{Mode::kTrain, &dropout_rng};
    const EpisodeOutput out = forward_episode(net, ep, pseudo, ctx);
    const Tensor loss = prediction_loss(out.full, ep.query.mask, loss_weight(ep.query.mask, config));
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError(std::string("training diverged in stage ") + stage_name(stage) + " at episode " +
                         std::to_string(step) + " (class " + std::to_string(ep.class_id) + ")");
    }
    StepResult res;
    try {
      backward(loss);
      res = opt.step();
    } catch (const NumericError&) {
      res.applied = false;
      res.grad_norm_preclip = std::numeric_limits<double>::quiet_NaN();
    }
    opt.zero_grad();
    if (!res.applied) ++report.skipped_steps;
    report.losses.push_back(value);
    if (log) log({step, stage_name(stage), ep.class_id, value, res.grad_norm_preclip});
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace

std::string to_jsonl(const TrainLogRecord& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "{\"step\":" << r.step << ",\"stage\":\"" << r.stage << "\",\"class_id\":" << r.class_id
     << ",\"loss\":" << r.loss << ",\"grad_norm_preclip\":";
  if (std::isfinite(r.grad_norm_preclip)) {
    os << r.grad_norm_preclip;
  } else {
    os << "null";
  }
  os << "}";
  return os.str();
}

double smoothed_loss(const std::vector<double>& losses, std::size_t end, std::size_t window) {
  if (losses.empty() || end == 0) return 0.0;
  end = std::min(end, losses.size());
  const std::size_t begin = end > window ? end - window : 0;
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += losses[i];
  return s / static_cast<double>(end - begin);
}

std::vector<LabeledImage> load_dataset(const RunConfig& config) {
  if (!config.data_dir.empty()) return ingest_external(config.data_dir);
  return generate_synthetic_dataset(config.num_classes, config.per_class, config.image_side, config.data_seed);
}

Network make_prior_network(const RunConfig& config, int fold) {
  return Network::create(config.prior_network(), "prior", derive_seed(config.seed, 101, static_cast<std::uint64_t>(fold)));
}

Network make_seg_network(const RunConfig& config, int fold) {
  return Network::create(config.seg_network(), "seg", derive_seed(config.seed, 102, static_cast<std::uint64_t>(fold)));
}

StageReport train_prior_stage(Network& prior, const std::vector<LabeledImage>& data, const FoldSplit& split,
                              const RunConfig& config, const LogSink& log) {
  return run_stage(Stage::kPrior, prior, nullptr, data, split, config, log);
}

StageReport train_seg_stage(Network& seg, const Network& prior, const std::vector<LabeledImage>& data,
                            const FoldSplit& split, const RunConfig& config, const LogSink& log) {
  return run_stage(Stage::kSeg, seg, &prior, data, split, config, log);
}

TwoStageResult train_two_stage(const std::vector<LabeledImage>& data, int fold, const RunConfig& config,
                               const LogSink& log) {
  config.validate();
  const FoldSplit split = split_classes(config.num_classes, fold);
  TwoStageResult result{Pipeline{make_prior_network(config, fold), std::nullopt}, {}, {}};
  result.prior = train_prior_stage(result.pipeline.prior, data, split, config, log);
  if (config.use_seg_stage) {
    Network seg = make_seg_network(config, fold);
    result.seg = train_seg_stage(seg, result.pipeline.prior, data, split, config, log);
    result.pipeline.seg = std::move(seg);
  }
  return result;
}

}  // namespace pemp
