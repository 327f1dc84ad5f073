#include "pemp/backbone.hpp"

#include <cmath>

namespace pemp {

namespace {

ConvParams make_conv(std::size_t out, std::size_t in, std::size_t k, double stddev, Rng* rng) {
  std::vector<double> w(out * in * k * k, 0.0);
  if (rng) {
    for (double& v : w) v = stddev * normal(*rng);
  }
  return {Tensor::parameter({out, in, k, k}, std::move(w)), Tensor::parameter({out}, std::vector<double>(out, 0.0))};
}

BackboneParams build(const BackboneConfig& config, Rng* rng) {
  if (config.widths.empty()) throw DimensionError("backbone needs at least one block");
  if (config.in_channels != 3 && config.in_channels != 4) throw DimensionError("backbone input must have 3 or 4 channels");
  BackboneParams p;
  p.config = config;
  auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  for (std::size_t b = 0; b < config.widths.size(); ++b) {
    const std::size_t in = config.block_input_channels(b);
    const std::size_t w = config.widths[b];
    p.blocks.push_back({make_conv(w, in, 3, he(in * 9), rng), make_conv(w, w, 3, he(w * 9), rng)});
  }
  if (!config.purifier) return p;
  const std::size_t d = config.feature_dim;
  const std::size_t top = config.widths.back();
  p.purifier.reduce = make_conv(d, top, 1, he(top), rng);
  p.purifier.smooth = make_conv(d, d, 3, he(d * 9), rng);
  for (std::size_t i = 0; i < config.aspp_dilations.size(); ++i) {
    p.purifier.aspp.push_back(make_conv(d, d, 3, he(d * 9), rng));
  }
  const std::size_t cat = d * config.aspp_dilations.size();
  p.purifier.project = make_conv(d, cat, 1, std::sqrt(1.0 / static_cast<double>(cat)), rng);
  return p;
}

void add_conv(NamedTensors& out, const std::string& name, const ConvParams& c) {
  out.emplace_back(name + ".kernel", c.kernel);
  out.emplace_back(name + ".bias", c.bias);
}

Tensor conv(const ConvParams& c, const Tensor& x, std::size_t pad = 0, std::size_t dilation = 1) {
  return conv2d(x, c.kernel, c.bias, {1, pad, dilation});
}

}  // namespace

std::size_t BackboneConfig::block_input_channels(std::size_t block) const {
  const std::size_t base = block == 0 ? in_channels : widths.at(block - 1);
  return base + (comm_channels ? 2 : 0);
}

BackboneParams BackboneParams::init(const BackboneConfig& config, Rng& rng) { return build(config, &rng); }

BackboneParams BackboneParams::zeros(const BackboneConfig& config) { return build(config, nullptr); }

NamedTensors BackboneParams::named(const std::string& prefix) const {
  NamedTensors out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string block = prefix + ".block" + std::to_string(b + 1);
    add_conv(out, block + ".conv1", blocks[b].conv1);
    add_conv(out, block + ".conv2", blocks[b].conv2);
  }
  if (!config.purifier) return out;
  add_conv(out, prefix + ".purifier.reduce", purifier.reduce);
  add_conv(out, prefix + ".purifier.smooth", purifier.smooth);
  for (std::size_t i = 0; i < purifier.aspp.size(); ++i) {
    add_conv(out, prefix + ".purifier.aspp" + std::to_string(i), purifier.aspp[i]);
  }
  add_conv(out, prefix + ".purifier.project", purifier.project);
  return out;
}

std::size_t BackboneParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named("p")) n += t.numel();
  return n;
}

bool block_downsamples(std::size_t block) { return block < 2; }

Tensor backbone_input(const Tensor& image, const std::optional<Tensor>& label, const BackboneConfig& config) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("image must be [3,H,W], got " + shape_str(image.shape()));
  const bool wants_label = config.in_channels == 4;
  if (wants_label != label.has_value()) {
    throw DimensionError(wants_label ? "backbone expects a label channel but none was given"
                                     : "backbone has no label channel but a label was given");
  }
  if (!label) return image;
  if (label->shape() != Shape{1, image.dim(1), image.dim(2)}) {
    throw DimensionError("label shape " + shape_str(label->shape()) + " does not match image");
  }
  return concat_channels({image, *label});
}

Tensor apply_block(const BlockParams& block, const Tensor& x, std::size_t index) {
  Tensor y = relu(conv(block.conv1, x, 1));
  y = relu(conv(block.conv2, y, 1));
  return block_downsamples(index) ? avg_pool2(y) : y;
}

Tensor apply_purifier(const PurifierParams& purifier, const BackboneConfig& config, const Tensor& x,
                      const ForwardContext& ctx) {
  if (!config.purifier) return x;
  Tensor y = relu(conv(purifier.reduce, x));
  y = relu(conv(purifier.smooth, y, 1));
  std::vector<Tensor> branches;
  for (std::size_t i = 0; i < purifier.aspp.size(); ++i) {
    const std::size_t dil = config.aspp_dilations[i];
    branches.push_back(relu(conv(purifier.aspp[i], y, dil, dil)));
  }
  Tensor cat = branches.size() == 1 ? branches.front() : concat_channels(branches);
  cat = dropout_channels(cat, config.dropout, ctx);
  return conv(purifier.project, cat);
}

Tensor extract_features(const Tensor& image, const std::optional<Tensor>& label, const BackboneParams& params,
                        const ForwardContext& ctx) {
  Tensor x = backbone_input(image, label, params.config);
  if (x.dim(1) % 4 || x.dim(2) % 4) throw DimensionError("image sides must be divisible by 4");
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    if (params.config.comm_channels) x = concat_channels({x, Tensor({2, x.dim(1), x.dim(2)}, 0.0)});
    x = apply_block(params.blocks[b], x, b);
  }
  return apply_purifier(params.purifier, params.config, x, ctx);
}

Tensor downsample_label(const Tensor& label, std::size_t h, std::size_t w) {
  if (label.rank() != 3 || label.dim(0) != 1) throw DimensionError("label must be [1,H,W]");
  Tensor resized;
  {
    NoGradGuard guard;
    resized = bilinear_resize(label.detach(), h, w);
  }
  std::vector<double> out(resized.data().begin(), resized.data().end());
  for (double& v : out) v = v >= 0.5 ? 1.0 : 0.0;
  return Tensor({1, h, w}, std::move(out));
}

}  // namespace pemp
