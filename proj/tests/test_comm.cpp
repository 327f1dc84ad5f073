#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "pemp/comm.hpp"

using namespace pemp;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor random_mask(std::size_t h, std::size_t w, Rng& rng) {
  Tensor m({1, h, w}, 0.0);
  for (auto& v : m.mutable_data()) v = uniform01(rng) < 0.5 ? 1.0 : 0.0;
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor constant_features(const std::vector<double>& v, std::size_t h, std::size_t w) {
  std::vector<double> out;
  for (double x : v) out.insert(out.end(), h * w, x);
  return Tensor({v.size(), h, w}, out);
}

}  // namespace

TEST_CASE("region_stats") {
  const Tensor f = constant_features({1.5, -2.0, 3.0}, 4, 4);
  SUBCASE("full mask") {
    const auto s = region_stats(f, Tensor({1, 4, 4}, 1.0));
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(s.mean[c] == doctest::Approx(f[c * 16]).epsilon(1e-14));
      CHECK(s.max[c] == f[c * 16]);
    }
  }
  SUBCASE("half mask halves the mean but not the max") {
    Tensor half({1, 4, 4}, 0.0);
    for (std::size_t i = 0; i < 8; ++i) half.mutable_data()[i] = 1.0;
    const auto s = region_stats(f, half);
    CHECK(s.mean[0] == doctest::Approx(0.75).epsilon(1e-14));
    CHECK(s.mean[2] == doctest::Approx(1.5).epsilon(1e-14));
    CHECK(s.max[0] == 1.5);
    CHECK(s.max[2] == 3.0);
    const auto masked = region_stats(f, half, true);
    CHECK(masked.mean[0] == doctest::Approx(1.5).epsilon(1e-14));
  }
  SUBCASE("empty mask gives zeros") {
    const auto s = region_stats(f, Tensor({1, 4, 4}, 0.0));
    for (double v : s.mean.data()) CHECK(v == 0.0);
    for (double v : s.max.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("merge_distribute") {
  Rng rng(1);
  const Tensor fs = random_tensor({2, 3, 3}, rng), fq = random_tensor({2, 3, 3}, rng);
  const RegionStats s{Tensor({2}, {1.5, 0.0}), Tensor({2}, {2.0, 1.0})};
  const RegionStats q{Tensor({2}, {0.5, 0.0}), Tensor({2}, {2.0, 3.0})};

  SUBCASE("zero parameters append zero channels and keep the rest") {
    const auto [a, b] = merge_distribute(s, q, CommParams::zeros(2), fs, fq);
    CHECK(a.shape() == Shape{4, 3, 3});
    for (std::size_t i = 0; i < 18; ++i) {
      CHECK(a[i] == fs[i]);
      CHECK(b[i] == fq[i]);
    }
    for (std::size_t i = 18; i < 36; ++i) {
      CHECK(a[i] == 0.0);
      CHECK(b[i] == 0.0);
    }
  }
  SUBCASE("hand-computed u") {
    // merged input = (mean 1, 0, max 2, 2); rows select entries 0 and 2
    CommParams p{Tensor({2, 4}, {1, 0, 0, 0, 0, 0, 1, 0}), Tensor({2}, {0.0, 0.0})};
    const Tensor u = merge_stats(s, q, p);
    CHECK(u[0] == 1.0);
    CHECK(u[1] == 2.0);
    const auto [a, b] = merge_distribute(s, q, p, fs, fq);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(a[18 + i] == 1.0);
      CHECK(a[27 + i] == 2.0);
      CHECK(b[18 + i] == 1.0);
      CHECK(b[27 + i] == 2.0);
    }
  }
  SUBCASE("swapping branches leaves u unchanged") {
    const CommParams p = CommParams::init(2, rng, 1.0);
    CHECK(max_abs_diff(merge_stats(s, q, p), merge_stats(q, s, p)) == 0.0);
  }
  SUBCASE("resolution mismatch") {
    CHECK_THROWS_AS(merge_distribute(s, q, CommParams::zeros(2), fs, random_tensor({2, 2, 3}, rng)), DimensionError);
  }
}

TEST_CASE("identical branches receive identical features") {
  Rng rng(2);
  BackboneConfig c;
  c.in_channels = 4;
  c.widths = {3, 4, 4, 5};
  c.feature_dim = 4;
  c.comm_channels = true;
  const auto backbone = BackboneParams::init(c, rng);
  std::vector<CommParams> comm;
  for (std::size_t b = 0; b < 4; ++b) comm.push_back(CommParams::init(c.block_input_channels(b) - 2, rng, 0.5));
  const Branch branch{random_tensor({3, 16, 16}, rng), random_mask(16, 16, rng)};
  const auto out = extract_features_with_comm({branch}, branch, backbone, comm, {});
  CHECK(max_abs_diff(out.supports[0], out.query) == 0.0);
}

TEST_CASE("zeroed communication modules reduce to the plain backbone") {
  Rng rng(3);
  BackboneConfig c;
  c.in_channels = 4;
  c.widths = {3, 4, 4, 5};
  c.feature_dim = 4;
  c.comm_channels = true;
  const auto backbone = BackboneParams::init(c, rng);
  std::vector<CommParams> comm;
  for (std::size_t b = 0; b < 4; ++b) comm.push_back(CommParams::zeros(c.block_input_channels(b) - 2));
  const Branch s1{random_tensor({3, 16, 16}, rng), random_mask(16, 16, rng)};
  const Branch s2{random_tensor({3, 16, 16}, rng), random_mask(16, 16, rng)};
  const Branch q{random_tensor({3, 16, 16}, rng), random_mask(16, 16, rng)};
  const auto out = extract_features_with_comm({s1, s2}, q, backbone, comm, {});
  CHECK(max_abs_diff(out.query, extract_features(q.image, q.label, backbone, {})) <= 1e-10);
  CHECK(max_abs_diff(out.supports[0], extract_features(s1.image, s1.label, backbone, {})) <= 1e-10);
  CHECK(max_abs_diff(out.supports[1], extract_features(s2.image, s2.label, backbone, {})) <= 1e-10);

  CHECK_THROWS_AS(extract_features_with_comm({s1}, q, backbone, {comm[0]}, {}), DimensionError);
}

TEST_CASE("average_stats") {
  const RegionStats a{Tensor({2}, {1.0, 2.0}), Tensor({2}, {4.0, 0.0})};
  const RegionStats b{Tensor({2}, {3.0, 0.0}), Tensor({2}, {0.0, 2.0})};
  const auto m = average_stats({a, b});
  CHECK(m.mean[0] == 2.0);
  CHECK(m.mean[1] == 1.0);
  CHECK(m.max[0] == 2.0);
  CHECK(m.max[1] == 1.0);
  CHECK_THROWS_AS(average_stats({}), DimensionError);
}
