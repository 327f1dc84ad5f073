#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "pemp/ops.hpp"
#include "pemp/rng.hpp"

using namespace pemp;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = uniform(rng, -1.0, 1.0);
  return Tensor(std::move(shape), std::move(v));
}

// Direct-summation convolution used as an oracle.
double conv_at(const Tensor& in, const Tensor& k, std::size_t co, std::size_t oy, std::size_t ox, Conv2dOptions o) {
  const auto cin = in.dim(0), h = in.dim(1), w = in.dim(2), ks = k.dim(2);
  double s = 0.0;
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < ks; ++ky)
      for (std::size_t kx = 0; kx < ks; ++kx) {
        const long iy = static_cast<long>(oy * o.stride + ky * o.dilation) - static_cast<long>(o.pad);
        const long ix = static_cast<long>(ox * o.stride + kx * o.dilation) - static_cast<long>(o.pad);
        if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
        s += in.at(c, iy, ix) * k.data()[((co * cin + c) * ks + ky) * ks + kx];
      }
  return s;
}

}  // namespace

TEST_CASE("conv2d with an identity 1x1 kernel is the identity map") {
  Rng rng(1);
  const Tensor x = random_tensor({1, 6, 5}, rng);
  const Tensor y = conv2d(x, Tensor({1, 1, 1, 1}, 1.0));
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d of a constant with a 3x3 ones kernel gives 9v inside") {
  const double v = 0.37;
  const Tensor y = conv2d(Tensor({1, 6, 6}, v), Tensor({1, 1, 3, 3}, 1.0), {}, {1, 1, 1});
  for (std::size_t r = 1; r < 5; ++r)
    for (std::size_t c = 1; c < 5; ++c) CHECK(y.at(0, r, c) == doctest::Approx(9 * v).epsilon(1e-15));
  CHECK(y.at(0, 0, 0) == doctest::Approx(4 * v));
}

TEST_CASE("conv2d output shape rule") {
  Rng rng(2);
  CHECK(conv2d(random_tensor({4, 16, 16}, rng), random_tensor({8, 4, 3, 3}, rng), {}, {1, 1, 1}).shape() ==
        Shape{8, 16, 16});
  for (std::size_t stride : {1, 2, 3})
    for (std::size_t pad : {0, 1, 2})
      for (std::size_t dil : {1, 2}) {
        const Conv2dOptions o{stride, pad, dil};
        const std::size_t expected = (11 + 2 * pad - dil * 2 - 1) / stride + 1;
        CHECK(conv_output_size(11, 3, o) == expected);
      }
}

TEST_CASE("conv2d matches direct summation for strided and dilated kernels") {
  Rng rng(3);
  const Tensor x = random_tensor({3, 9, 8}, rng);
  const Tensor k = random_tensor({2, 3, 3, 3}, rng);
  for (Conv2dOptions o : {Conv2dOptions{1, 1, 1}, Conv2dOptions{2, 1, 1}, Conv2dOptions{1, 2, 2}, Conv2dOptions{2, 0, 2}}) {
    const Tensor y = conv2d(x, k, {}, o);
    for (std::size_t co = 0; co < 2; ++co)
      for (std::size_t oy = 0; oy < y.dim(1); ++oy)
        for (std::size_t ox = 0; ox < y.dim(2); ++ox)
          CHECK(y.at(co, oy, ox) == doctest::Approx(conv_at(x, k, co, oy, ox, o)).epsilon(1e-12));
  }
}

TEST_CASE("conv2d rejects mismatched channels") {
  CHECK_THROWS_AS(conv2d(Tensor({3, 4, 4}), Tensor({2, 4, 3, 3})), DimensionError);
  CHECK_THROWS_AS(conv2d(Tensor({3, 4, 4}), Tensor({2, 3, 2, 2})), DimensionError);
}

TEST_CASE("softmax examples") {
  const Tensor half = softmax(Tensor({2, 1, 1}, {0.0, 0.0}), 0);
  CHECK(half.data()[0] == 0.5);
  CHECK(half.data()[1] == 0.5);

  const Tensor sharp = softmax(Tensor({2, 1, 1}, {20.0, 0.0}), 0);
  const double tail = 1.0 / (1.0 + std::exp(20.0));
  CHECK(tail == doctest::Approx(2.061e-9).epsilon(1e-3));
  CHECK(std::abs(sharp.data()[1] - tail) <= 1e-12);
  CHECK(std::abs(sharp.data()[0] - (1.0 - tail)) <= 1e-12);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = random_tensor({4, 3, 3}, rng);
    const Tensor p = softmax(scale(z, 30.0), 0);
    const Tensor q = softmax(add_scalar(scale(z, 30.0), uniform(rng, -50.0, 50.0)), 0);
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) {
        CHECK(p.data()[c * 9 + i] >= 0.0);
        s += p.data()[c * 9 + i];
        CHECK(q.data()[c * 9 + i] == doctest::Approx(p.data()[c * 9 + i]).epsilon(1e-12));
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
  const Tensor big = softmax(Tensor({2, 1, 1}, {1000.0, -1000.0}), 0);
  CHECK(big.all_finite());
}

TEST_CASE("bilinear resize matches a half-pixel oracle") {
  Rng rng(6);
  const Tensor x = random_tensor({2, 5, 7}, rng);
  const std::size_t oh = 3, ow = 11;
  const Tensor y = bilinear_resize(x, oh, ow);
  auto sample = [&](std::size_t c, double sy, double sx) {
    sy = std::clamp(sy, 0.0, 4.0);
    sx = std::clamp(sx, 0.0, 6.0);
    const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
    const auto y1 = std::min<std::size_t>(y0 + 1, 4), x1 = std::min<std::size_t>(x0 + 1, 6);
    const double fy = sy - y0, fx = sx - x0;
    return (1 - fy) * ((1 - fx) * x.at(c, y0, x0) + fx * x.at(c, y0, x1)) +
           fy * ((1 - fx) * x.at(c, y1, x0) + fx * x.at(c, y1, x1));
  };
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const double sy = (i + 0.5) * 5.0 / oh - 0.5, sx = (j + 0.5) * 7.0 / ow - 0.5;
        CHECK(y.at(c, i, j) == doctest::Approx(sample(c, sy, sx)).epsilon(1e-12));
      }
  const Tensor same = bilinear_resize(x, 5, 7);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(same.data()[i] == x.data()[i]);
}

TEST_CASE("pooling, concat and slicing") {
  const Tensor x({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  const Tensor p = avg_pool2(x);
  CHECK(p.shape() == Shape{1, 1, 2});
  CHECK(p.data()[0] == 3.5);
  CHECK(p.data()[1] == 5.5);
  CHECK_THROWS_AS(avg_pool2(Tensor({1, 3, 4})), DimensionError);

  const Tensor c = concat_channels({x, scale(x, 2.0)});
  CHECK(c.shape() == Shape{2, 2, 4});
  CHECK(c.at(1, 1, 3) == 16.0);
  const Tensor s = slice_channels(c, 1, 2);
  CHECK(s.data()[0] == 2.0);
  const Tensor wide = concat({x, x}, 2);
  CHECK(wide.shape() == Shape{1, 2, 8});
  CHECK(wide.at(0, 1, 4) == 5.0);
}

TEST_CASE("masked reductions") {
  const Tensor x({2, 1, 3}, {1, 5, 3, -1, -2, 4});
  const Tensor m({1, 1, 3}, {1, 1, 0});
  const Tensor mean = spatial_mean(x, m);
  CHECK(mean.data()[0] == doctest::Approx(2.0));
  CHECK(mean.data()[1] == doctest::Approx(-1.0));
  CHECK(spatial_mean(x, m, 2.0).data()[0] == doctest::Approx(3.0));
  const Tensor mx = spatial_max(x, m);
  CHECK(mx.data()[0] == 5.0);
  CHECK(mx.data()[1] == 0.0);  // masked-out pixel contributes 0
  CHECK(spatial_mean(x).data()[0] == doctest::Approx(3.0));
}

TEST_CASE("max over channels breaks ties toward the lowest index") {
  const Tensor x({3, 1, 2}, {0.5, 0.1, 0.5, 0.9, 0.2, 0.9});
  const ArgMax a = max_over_channels(x);
  CHECK(a.indices[0] == 0);
  CHECK(a.indices[1] == 1);
  CHECK(a.values.data()[1] == 0.9);
}

TEST_CASE("cosine similarity map") {
  const Tensor f({2, 1, 3}, {1, 0, 0, 0, 2, 0});
  const Tensor p({2, 2}, {3, 0, 1, 1});
  const Tensor s = cosine_similarity_map(f, p);
  CHECK(s.at(0, 0, 0) == doctest::Approx(1.0));
  CHECK(s.at(0, 0, 1) == doctest::Approx(0.0));
  CHECK(s.at(1, 0, 1) == doctest::Approx(std::sqrt(0.5)));
  CHECK(s.at(0, 0, 2) == 0.0);  // zero-norm feature
  const Tensor z = cosine_similarity_map(f, Tensor({1, 2}, 0.0));
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("euclidean distance map") {
  const Tensor f({2, 1, 2}, {0, 3, 0, 4});
  const Tensor d = euclidean_distance_map(f, Tensor({1, 2}, {0.0, 0.0}));
  CHECK(d.data()[0] == 0.0);
  CHECK(d.data()[1] == doctest::Approx(5.0));
}

TEST_CASE("channel dropout is train-only") {
  Rng rng(1);
  const Tensor x = random_tensor({16, 2, 2}, rng);
  const Tensor e = dropout_channels(x, 0.5, ForwardContext{Mode::kEval, nullptr});
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(e.data()[i] == x.data()[i]);

  Rng drop(7);
  const Tensor t = dropout_channels(x, 0.5, ForwardContext{Mode::kTrain, &drop});
  std::size_t zeroed = 0;
  for (std::size_t c = 0; c < 16; ++c) {
    const double r = t.data()[c * 4] / x.data()[c * 4];
    CHECK((r == 0.0 || r == doctest::Approx(2.0)));
    for (std::size_t p = 1; p < 4; ++p) CHECK(t.data()[c * 4 + p] == doctest::Approx(r * x.data()[c * 4 + p]));
    zeroed += r == 0.0;
  }
  CHECK(zeroed > 0);
  CHECK(zeroed < 16);
  CHECK_THROWS_AS(dropout_channels(x, 0.5, ForwardContext{Mode::kTrain, nullptr}), GraphError);
}

TEST_CASE("matmul and transpose") {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b({3, 1}, {1, 0, -1});
  const Tensor c = matmul(a, b);
  CHECK(c.data()[0] == -2.0);
  CHECK(c.data()[1] == -2.0);
  CHECK(transpose(a).shape() == Shape{3, 2});
  CHECK(transpose(a).data()[1] == 4.0);
}
