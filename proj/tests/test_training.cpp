#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pemp/loss.hpp"
#include "pemp/optim.hpp"
#include "pemp/serialize.hpp"
#include "pemp/trainer.hpp"

using namespace pemp;

namespace {

Tensor random_binary(std::size_t h, std::size_t w, double p, Rng& rng) {
  Tensor m({1, h, w}, 0.0);
  for (auto& v : m.mutable_data()) v = uniform01(rng) < p ? 1.0 : 0.0;
  return m;
}

double brute_distance(const Tensor& features, std::size_t y, std::size_t x) {
  const std::size_t h = features.dim(1), w = features.dim(2);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t fy = 0; fy < h; ++fy)
    for (std::size_t fx = 0; fx < w; ++fx) {
      if (features.at(0, fy, fx) == 0.0) continue;
      const double dy = double(fy) - double(y), dx = double(fx) - double(x);
      best = std::min(best, std::sqrt(dy * dy + dx * dx));
    }
  return best;
}

PredictionMap prediction_with_fg(const std::vector<double>& fg, std::size_t h, std::size_t w) {
  std::vector<double> probs(fg);
  for (double v : fg) probs.push_back(1.0 - v);
  PredictionMap p;
  p.probs = Tensor({2, h, w}, probs);
  p.logits = p.probs;
  return p;
}

std::string snapshot(const NamedTensors& named) {
  std::string out;
  for (const auto& [name, t] : named) out += name + tensor_to_bytes(t);
  return out;
}

RunConfig tiny_config() {
  RunConfig c;
  c.widths = {4, 8, 8, 8};
  c.feature_dim = 8;
  c.episodes_per_epoch = 20;
  c.epochs_prior = 1;
  c.epochs_seg = 1;
  c.per_class = 10;
  c.image_side = 32;
  return c;
}

}  // namespace

TEST_CASE("published hyperparameters are the defaults") {
  const RunConfig c;
  CHECK(c.gamma == 20.0);
  CHECK(c.sigma == 5.0);
  CHECK(c.prototypes == 3);
  CHECK(c.clip_norm == 1.1);
  CHECK(c.momentum == 0.9);
  CHECK(c.weight_decay == 0.0005);
  CHECK(c.lr_prior == 0.001);
  CHECK(c.lr_seg == 0.0035);
  CHECK(split_classes(20, 0).novel_classes.size() == 5);
}

TEST_CASE("boundary_map") {
  const Tensor empty = boundary_map(Tensor({1, 5, 6}, 0.0));
  CHECK(std::all_of(empty.data().begin(), empty.data().end(), [](double v) { return v == 0.0; }));

  const Tensor ring = boundary_map(Tensor({1, 5, 6}, 1.0));
  for (std::size_t y = 0; y < 5; ++y)
    for (std::size_t x = 0; x < 6; ++x) {
      const bool border = y == 0 || x == 0 || y == 4 || x == 5;
      CHECK(ring.at(0, y, x) == (border ? 1.0 : 0.0));
    }

  Tensor dot({1, 5, 5}, 0.0);
  dot.mutable_data()[12] = 1.0;
  const Tensor b = boundary_map(dot);
  CHECK(std::count(b.data().begin(), b.data().end(), 1.0) == 1);
  CHECK(b[12] == 1.0);

  Rng rng(1);
  const Tensor label = random_binary(12, 12, 0.6, rng);
  const Tensor rule = boundary_map(label);
  for (std::size_t y = 0; y < 12; ++y)
    for (std::size_t x = 0; x < 12; ++x) {
      auto bg = [&](long yy, long xx) {
        return yy < 0 || xx < 0 || yy >= 12 || xx >= 12 || label.at(0, std::size_t(yy), std::size_t(xx)) == 0.0;
      };
      const long Y = long(y), X = long(x);
      const bool expect = label.at(0, y, x) == 1.0 && (bg(Y - 1, X) || bg(Y + 1, X) || bg(Y, X - 1) || bg(Y, X + 1));
      CHECK(rule.at(0, y, x) == (expect ? 1.0 : 0.0));
    }
}

TEST_CASE("edt") {
  const Tensor all = edt(Tensor({1, 4, 4}, 1.0));
  for (double v : all.data()) CHECK(v == 0.0);

  Tensor corner({1, 8, 8}, 0.0);
  corner.mutable_data()[0] = 1.0;
  CHECK(edt(corner).at(0, 3, 4) == 5.0);

  const Tensor none = edt(Tensor({1, 3, 3}, 0.0));
  for (double v : none.data()) CHECK(v == kEdtSentinel);

  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t h = 1 + uniform_index(rng, 32), w = 1 + uniform_index(rng, 32);
    Tensor f = random_binary(h, w, uniform(rng, 0.005, 0.3), rng);
    f.mutable_data()[uniform_index(rng, h * w)] = 1.0;
    const Tensor d = edt(f);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) CHECK(std::abs(d.at(0, y, x) - brute_distance(f, y, x)) <= 1e-9);
  }
}

TEST_CASE("weight_map") {
  Tensor b({1, 32, 32}, 0.0);
  b.mutable_data()[0] = 1.0;
  const Tensor w = weight_map(b, 5.0);
  CHECK(w.at(0, 0, 0) == 2.0);
  CHECK(w.at(0, 15, 20) == doctest::Approx(std::exp(-1.0) + 1.0).epsilon(1e-12));
  CHECK(w.at(0, 15, 20) == doctest::Approx(1.36788).epsilon(1e-5));
  CHECK(weight_map(b, 5.0, true).at(0, 3, 4) == doctest::Approx(std::exp(-1.0) + 1.0).epsilon(1e-12));
  const Tensor far = weight_map(Tensor({1, 4, 4}, 0.0), 5.0);
  for (double v : far.data()) CHECK(v == doctest::Approx(1.0));

  Rng rng(3);
  const Tensor label = random_binary(24, 24, 0.5, rng);
  const Tensor boundary = boundary_map(label);
  const Tensor wm = weight_map(boundary, 5.0);
  const Tensor dist = edt(boundary);
  for (std::size_t i = 0; i < wm.numel(); ++i) {
    CHECK(wm[i] > 1.0);
    CHECK(wm[i] <= 2.0);
    CHECK((wm[i] == 2.0) == (boundary[i] == 1.0));
    for (std::size_t j = 0; j < wm.numel(); j += 37)
      if (dist[i] < dist[j]) CHECK(wm[i] > wm[j]);
  }
}

TEST_CASE("weighted_bce") {
  const Tensor ones({1, 3, 3}, 1.0);
  Rng rng(4);
  const Tensor y = random_binary(3, 3, 0.5, rng);
  CHECK(weighted_bce(Tensor({1, 3, 3}, 0.5), y, ones).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(weighted_bce(Tensor({1, 3, 3}, 0.5), y, ones).item() == doctest::Approx(0.693147).epsilon(1e-6));

  const double perfect = weighted_bce(y, y, Tensor({1, 3, 3}, 2.0)).item();
  CHECK(perfect >= 0.0);
  CHECK(perfect <= 2.0 * std::abs(std::log(1.0 - 1e-7)) * (1.0 + 1e-9));

  std::vector<double> pv(9);
  for (auto& v : pv) v = uniform(rng, 0.05, 0.95);
  const Tensor p({1, 3, 3}, pv);
  const Tensor w = weight_map(boundary_map(y), 5.0);
  const double l1 = weighted_bce(p, y, w).item();
  const double l2 = weighted_bce(p, y, scale(w, 2.0)).item();
  CHECK(l1 > 0.0);
  CHECK(l2 == doctest::Approx(2.0 * l1).epsilon(1e-14));
}

TEST_CASE("binarize_prior") {
  const auto half = binarize_prior(prediction_with_fg({0.5, 0.49, 0.51, 0.0}, 2, 2), 2, 2);
  CHECK(half[0] == 1.0);
  CHECK(half[1] == 0.0);
  CHECK(half[2] == 1.0);
  CHECK(half[3] == 0.0);

  const auto all = binarize_prior(prediction_with_fg(std::vector<double>(16, 0.7), 4, 4), 16, 16);
  CHECK(all.shape() == Shape{1, 16, 16});
  for (double v : all.data()) CHECK(v == 1.0);

  Rng rng(5);
  std::vector<double> fg(36);
  for (auto& v : fg) v = uniform01(rng);
  const Tensor once = binarize_prior(prediction_with_fg(fg, 6, 6), 6, 6);
  const Tensor twice =
      binarize_prior(prediction_with_fg(std::vector<double>(once.data().begin(), once.data().end()), 6, 6), 6, 6);
  CHECK(std::equal(once.data().begin(), once.data().end(), twice.data().begin()));
}

TEST_CASE("sgd_update") {
  SUBCASE("hand arithmetic") {
    Tensor p = Tensor::parameter({1}, {1.0});
    SgdOptimizer opt({p}, SgdConfig{0.1, 0.0, 0.0, 1.1});
    backward(scale(sum(p), 0.1));
    opt.step();
    CHECK(p[0] == doctest::Approx(0.99).epsilon(1e-15));
  }
  SUBCASE("zero gradients without decay leave parameters unchanged") {
    Tensor p = Tensor::parameter({3}, {1.0, -2.0, 0.5});
    SgdOptimizer opt({p}, SgdConfig{0.1, 0.9, 0.0, 1.1});
    backward(scale(sum(p), 0.0));
    opt.step();
    CHECK(p[0] == 1.0);
    CHECK(p[1] == -2.0);
  }
  SUBCASE("norm 2.2 clips to exactly 1.1") {
    std::vector<double> a{2.2 * 0.6, 0.0}, b{2.2 * 0.8};
    const double pre = clip_global_norm({&a, &b}, 1.1);
    CHECK(pre == doctest::Approx(2.2).epsilon(1e-15));
    CHECK(global_norm({&a, &b}) == doctest::Approx(1.1).epsilon(1e-15));
  }
  SUBCASE("momentum and weight decay") {
    Tensor p = Tensor::parameter({1}, {2.0});
    SgdOptimizer opt({p}, SgdConfig{0.1, 0.9, 0.5, 0.0});
    backward(scale(sum(p), 0.3));
    opt.step();  // v = 0.3 + 1.0
    CHECK(p[0] == doctest::Approx(2.0 - 0.13).epsilon(1e-14));
    p.zero_grad();
    backward(scale(sum(p), 0.3));
    opt.step();  // v = 0.9*1.3 + 0.3 + 0.5*1.87
    CHECK(p[0] == doctest::Approx(1.87 - 0.1 * (1.17 + 0.3 + 0.935)).epsilon(1e-14));
    CHECK(opt.momentum_buffers()[0].size() == 1);
  }
  SUBCASE("non-finite gradients skip the step") {
    Tensor p = Tensor::parameter({2}, {1.0, 1.0});
    SgdOptimizer opt({p}, SgdConfig{});
    backward(scale(sum(p), 1.0));
    const_cast<double*>(p.grad().data())[1] = std::nan("");
    CHECK_FALSE(opt.step().applied);
    CHECK(p[0] == 1.0);
  }
}

TEST_CASE("clip contract on random gradient sets") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> bufs(1 + uniform_index(rng, 4));
    const double s = std::exp(uniform(rng, -4.0, 3.0));
    for (auto& b : bufs) {
      b.resize(1 + uniform_index(rng, 20));
      for (auto& v : b) v = s * normal(rng);
    }
    const auto original = bufs;
    std::vector<std::vector<double>*> ptrs;
    for (auto& b : bufs) ptrs.push_back(&b);
    const double pre = clip_global_norm(ptrs, 1.1);
    CHECK(global_norm(ptrs) <= 1.1 + 1e-12);
    if (pre <= 1.1) CHECK(bufs == original);
  }
}

TEST_CASE("smoothed_loss and log records") {
  const std::vector<double> l{4, 2, 2, 2};
  CHECK(smoothed_loss(l, 4, 3) == 2.0);
  CHECK(smoothed_loss(l, 2, 50) == 3.0);
  const std::string line = to_jsonl({3, "prior", 2, 0.5, std::nan("")});
  CHECK(line.find("\"grad_norm_preclip\":null") != std::string::npos);
  CHECK(line.find("\"stage\":\"prior\"") != std::string::npos);
}

TEST_CASE("two-stage training: freeze and determinism") {
  const RunConfig cfg = tiny_config();
  const auto data = load_dataset(cfg);
  const FoldSplit split = split_classes(cfg.num_classes, 0);

  Network prior = make_prior_network(cfg, 0);
  std::vector<TrainLogRecord> log;
  const auto r1 = train_prior_stage(prior, data, split, cfg, [&](const TrainLogRecord& r) { log.push_back(r); });
  CHECK(log.size() == 20);
  CHECK(r1.losses.size() == 20);
  const std::string frozen = snapshot(prior.named());

  Network seg = make_seg_network(cfg, 0);
  const std::string seg_init = snapshot(seg.named());
  train_seg_stage(seg, prior, data, split, cfg);
  CHECK(snapshot(prior.named()) == frozen);
  CHECK(snapshot(seg.named()) != seg_init);

  const auto a = train_two_stage(data, 0, cfg);
  const auto b = train_two_stage(data, 0, cfg);
  CHECK(snapshot(a.pipeline.prior.named()) == frozen);
  CHECK(snapshot(a.pipeline.prior.named()) == snapshot(b.pipeline.prior.named()));
  REQUIRE(a.pipeline.seg.has_value());
  CHECK(snapshot(a.pipeline.seg->named()) == snapshot(b.pipeline.seg->named()));
  CHECK(snapshot(a.pipeline.seg->named()) == snapshot(seg.named()));
}

TEST_CASE("training loss halves on the synthetic task") {
  RunConfig cfg;
  cfg.widths = {8, 16, 16, 16};
  cfg.feature_dim = 16;
  cfg.episodes_per_epoch = 100;
  cfg.epochs_prior = 12;
  cfg.lr_prior = 0.003;
  const auto data = load_dataset(cfg);
  Network prior = make_prior_network(cfg, 0);
  const auto r = train_prior_stage(prior, data, split_classes(cfg.num_classes, 0), cfg);
  const double start = smoothed_loss(r.losses, 50, 50);
  const double end = smoothed_loss(r.losses, r.losses.size(), 50);
  MESSAGE("smoothed loss " << start << " -> " << end);
  CHECK(end <= 0.5 * start);
  CHECK(r.skipped_steps == 0);
}
