#include "pemp/gradcheck.hpp"

#include <cmath>

#include "pemp/comm.hpp"
#include "pemp/loss.hpp"
#include "pemp/proto.hpp"

namespace pemp {

namespace {

double project(const Tensor& out, const std::vector<double>& r) {
  double s = 0.0;
  const auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) s += d[i] * r[i];
  return s;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Magnitudes in [0.2, 1] with random sign, away from the relu kink.
Tensor off_kink(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (uniform01(rng) < 0.5 ? -1.0 : 1.0) * uniform(rng, 0.2, 1.0);
  return Tensor(std::move(shape), std::move(v));
}

Tensor binary_mask(std::size_t h, std::size_t w, const std::vector<int>& on) {
  std::vector<double> v(h * w, 0.0);
  for (int i : on) v[static_cast<std::size_t>(i)] = 1.0;
  return Tensor({1, h, w}, v);
}

}  // namespace

double gradcheck(const GraphFn& f, const std::vector<Tensor>& inputs, std::uint64_t seed, double step) {
  std::vector<Tensor> leaves;
  for (const auto& in : inputs) {
    Tensor t = in.detach();
    t.set_requires_grad(true);
    leaves.push_back(t);
  }
  Rng rng(seed);
  Tensor out = f(leaves);
  std::vector<double> r(out.numel());
  for (auto& x : r) x = uniform(rng, -1.0, 1.0);
  backward(sum(mul(out, Tensor(out.shape(), r))));

  std::vector<double> analytic;
  std::vector<double> numeric;
  NoGradGuard guard;
  for (auto& leaf : leaves) {
    const auto g = leaf.grad();
    analytic.insert(analytic.end(), g.begin(), g.end());
    auto data = leaf.mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double orig = data[j];
      data[j] = orig + step;
      const double up = project(f(leaves), r);
      data[j] = orig - step;
      const double down = project(f(leaves), r);
      data[j] = orig;
      numeric.push_back((up - down) / (2.0 * step));
    }
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return std::sqrt(diff) / denom;
}

std::vector<GradCheckResult> run_gradcheck_suite(double tolerance, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckResult> results;
  auto check = [&](const std::string& name, const GraphFn& f, const std::vector<Tensor>& inputs) {
    GradCheckResult r;
    r.name = name;
    for (const auto& t : inputs) r.parameters += t.numel();
    r.rel_error = gradcheck(f, inputs, derive_seed(seed, results.size()));
    r.passed = std::isfinite(r.rel_error) && r.rel_error <= tolerance;
    results.push_back(r);
  };
  using V = std::vector<Tensor>;

  const Tensor a = random_tensor({2, 3, 4}, rng);
  const Tensor b = random_tensor({2, 3, 4}, rng);
  check("add", [](const V& x) { return add(x[0], x[1]); }, {a, b});
  check("sub", [](const V& x) { return sub(x[0], x[1]); }, {a, b});
  check("mul", [](const V& x) { return mul(x[0], x[1]); }, {a, b});
  check("scale", [](const V& x) { return scale(x[0], -1.7); }, {a});
  check("add_scalar", [](const V& x) { return add_scalar(x[0], 0.3); }, {a});
  check("relu", [](const V& x) { return relu(x[0]); }, {off_kink({2, 3, 4}, rng)});
  check("exp", [](const V& x) { return exp(x[0]); }, {a});
  check("log", [](const V& x) { return log(x[0]); }, {random_tensor({2, 3, 4}, rng, 0.5, 2.0)});
  check("sum", [](const V& x) { return sum(x[0]); }, {a});
  check("mean", [](const V& x) { return mean(x[0]); }, {a});
  check("reshape", [](const V& x) { return reshape(x[0], {6, 4}); }, {a});
  check("transpose", [](const V& x) { return transpose(x[0]); }, {random_tensor({3, 5}, rng)});
  check("matmul", [](const V& x) { return matmul(x[0], x[1]); }, {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng)});

  const Tensor img = random_tensor({2, 4, 4}, rng);
  const Tensor ker = random_tensor({1, 2, 3, 3}, rng);
  const Tensor bias = random_tensor({1}, rng);
  check("conv2d", [](const V& x) { return conv2d(x[0], x[1], x[2], {1, 1, 1}); }, {img, ker, bias});
  check("conv2d_stride2", [](const V& x) { return conv2d(x[0], x[1], x[2], {2, 1, 1}); }, {img, ker, bias});
  check("conv2d_dilated", [](const V& x) { return conv2d(x[0], x[1], {}, {1, 2, 2}); }, {img, ker});
  check("conv2d_1x1", [](const V& x) { return conv2d(x[0], x[1], x[2]); },
        {img, random_tensor({3, 2, 1, 1}, rng), random_tensor({3}, rng)});
  check("avg_pool2", [](const V& x) { return avg_pool2(x[0]); }, {img});
  check("concat_axis0", [](const V& x) { return concat({x[0], x[1]}, 0); }, {img, random_tensor({1, 4, 4}, rng)});
  check("concat_axis2", [](const V& x) { return concat({x[0], x[1]}, 2); }, {img, random_tensor({2, 4, 3}, rng)});
  check("slice_channels", [](const V& x) { return slice_channels(x[0], 1, 3); }, {random_tensor({3, 3, 3}, rng)});
  check("softmax", [](const V& x) { return softmax(x[0], 0); }, {random_tensor({3, 3, 4}, rng, -2.0, 2.0)});
  check("max_over_channels", [](const V& x) { return max_over_channels(x[0]).values; }, {random_tensor({3, 4, 4}, rng)});

  const Tensor mask = binary_mask(4, 4, {1, 2, 5, 6, 9, 14});
  check("mul_spatial", [mask](const V& x) { return mul_spatial(x[0], x[1]); }, {img, random_tensor({1, 4, 4}, rng)});
  check("broadcast_spatial", [](const V& x) { return broadcast_spatial(x[0], 3, 2); }, {random_tensor({4}, rng)});
  check("spatial_mean", [mask](const V& x) { return spatial_mean(x[0], mask, 6.0); }, {img});
  check("spatial_max", [mask](const V& x) { return spatial_max(x[0], mask); }, {img});
  check("cosine_similarity_map", [](const V& x) { return cosine_similarity_map(x[0], x[1]); },
        {random_tensor({3, 3, 4}, rng), random_tensor({2, 3}, rng)});
  check("euclidean_distance_map", [](const V& x) { return euclidean_distance_map(x[0], x[1]); },
        {random_tensor({3, 3, 4}, rng), random_tensor({2, 3}, rng)});
  check("bilinear_up", [](const V& x) { return bilinear_resize(x[0], 7, 5); }, {random_tensor({2, 3, 2}, rng)});
  check("bilinear_down", [](const V& x) { return bilinear_resize(x[0], 3, 2); }, {random_tensor({2, 5, 4}, rng)});
  check("dropout_channels",
        [](const V& x) {
          Rng r(5);
          return dropout_channels(x[0], 0.5, ForwardContext{Mode::kTrain, &r});
        },
        {random_tensor({4, 3, 3}, rng)});

  const Tensor target = binary_mask(4, 4, {0, 1, 4, 5, 10, 11, 15});
  const Tensor weight = weight_map(boundary_map(target), 5.0);
  check("weighted_bce", [target, weight](const V& x) { return weighted_bce(x[0], target, weight); },
        {random_tensor({1, 4, 4}, rng, 0.05, 0.95)});

  check("masked_average_pool", [mask](const V& x) { return masked_average_pool(x[0], mask); }, {img});
  const Tensor smask = binary_mask(3, 3, {0, 1, 3, 4});
  check("adaptive_prototypes",
        [smask](const V& x) {
          MetaPrototypeBank bank{x[1], x[2]};
          const PrototypeSet p = adaptive_prototypes(x[0], smask, mpm_attention(x[0], bank));
          return concat({p.fg, p.bg}, 0);
        },
        {random_tensor({3, 3, 3}, rng), random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  check("fused_predict",
        [](const V& x) { return fused_predict(x[0], PrototypeSet{x[1], x[2], false}, 20.0).probs; },
        {random_tensor({3, 3, 3}, rng), random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
  check("baseline_predict", [](const V& x) { return baseline_predict(x[0], x[1], x[2], 20.0).probs; },
        {random_tensor({3, 3, 3}, rng), random_tensor({3}, rng), random_tensor({3}, rng)});

  const Tensor label_s = binary_mask(3, 3, {0, 1, 3});
  const Tensor label_q = binary_mask(3, 3, {4, 5, 8});
  for (bool masked : {false, true}) {
    check(masked ? "comm_masked_mean" : "comm",
          [label_s, label_q, masked](const V& x) {
            const RegionStats s = region_stats(x[0], label_s, masked);
            const RegionStats q = region_stats(x[1], label_q, masked);
            auto [fs, fq] = merge_distribute(s, q, CommParams{x[2], x[3]}, x[0], x[1]);
            return concat({fs, fq}, 0);
          },
          {random_tensor({2, 3, 3}, rng), random_tensor({2, 3, 3}, rng), random_tensor({2, 4}, rng),
           random_tensor({2}, rng)});
  }

  // Query [3,2,3] and support [3,3,3] features, M=2 meta-prototypes per
  // region, loss at 4x6 image resolution.
  const Tensor e2e_target = binary_mask(4, 6, {2, 3, 8, 9, 14, 15, 20});
  const Tensor e2e_weight = weight_map(boundary_map(e2e_target), 5.0);
  check("end_to_end_weighted_bce",
        [smask, e2e_target, e2e_weight](const V& x) {
          MetaPrototypeBank bank{x[2], x[3]};
          const PrototypeSet p = adaptive_prototypes(x[1], smask, mpm_attention(x[1], bank));
          const PredictionMap pred = upsample_prediction(fused_predict(x[0], p, 2.0), 4, 6);
          return prediction_loss(pred, e2e_target, e2e_weight);
        },
        {random_tensor({3, 2, 3}, rng), random_tensor({3, 3, 3}, rng), random_tensor({2, 3}, rng),
         random_tensor({2, 3}, rng)});
  return results;
}

}  // namespace pemp
