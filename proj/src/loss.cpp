#include "pemp/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pemp/backbone.hpp"

namespace pemp {

namespace {

constexpr double kClampLo = 1e-7;
constexpr double kClampHi = 1.0 - 1e-7;
constexpr double kFar = 1e20;

void require_binary_map(const Tensor& t, const char* op) {
  if (t.rank() != 3 || t.dim(0) != 1) throw DimensionError(std::string(op) + ": expected [1,H,W], got " + shape_str(t.shape()));
}

// Squared distance transform of a sampled function along one line.
void edt_1d(const double* f, std::size_t n, std::size_t stride, double* out, std::vector<std::size_t>& v,
            std::vector<double>& z, std::vector<double>& line) {
  for (std::size_t i = 0; i < n; ++i) line[i] = f[i * stride];
  std::size_t k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (std::size_t q = 1; q < n; ++q) {
    const double fq = line[q] + static_cast<double>(q * q);
    double s;
    while (true) {
      const double vk = static_cast<double>(v[k]);
      s = (fq - (line[v[k]] + vk * vk)) / (2.0 * static_cast<double>(q) - 2.0 * vk);
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {
      v[k] = q;  // k == 0: the new parabola dominates everywhere to the left
      z[k + 1] = std::numeric_limits<double>::infinity();
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const double d = static_cast<double>(q) - static_cast<double>(v[k]);
    out[q * stride] = d * d + line[v[k]];
  }
}

}  // namespace

Tensor boundary_map(const Tensor& label) {
  require_binary_map(label, "boundary_map");
  const std::size_t h = label.dim(1), w = label.dim(2);
  auto y = label.data();
  auto at = [&](std::ptrdiff_t r, std::ptrdiff_t c) {
    if (r < 0 || c < 0 || r >= static_cast<std::ptrdiff_t>(h) || c >= static_cast<std::ptrdiff_t>(w)) return 0.0;
    return y[static_cast<std::size_t>(r) * w + static_cast<std::size_t>(c)];
  };
  std::vector<double> out(h * w, 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (y[r * w + c] < 0.5) continue;
      const auto rr = static_cast<std::ptrdiff_t>(r), cc = static_cast<std::ptrdiff_t>(c);
      if (at(rr - 1, cc) < 0.5 || at(rr + 1, cc) < 0.5 || at(rr, cc - 1) < 0.5 || at(rr, cc + 1) < 0.5) {
        out[r * w + c] = 1.0;
      }
    }
  }
  return Tensor({1, h, w}, std::move(out));
}

Tensor edt(const Tensor& features) {
  require_binary_map(features, "edt");
  const std::size_t h = features.dim(1), w = features.dim(2);
  auto in = features.data();
  const bool any = std::any_of(in.begin(), in.end(), [](double v) { return v >= 0.5; });
  if (!any) return Tensor({1, h, w}, kEdtSentinel);

  std::vector<double> grid(h * w);
  for (std::size_t p = 0; p < h * w; ++p) grid[p] = in[p] >= 0.5 ? 0.0 : kFar;
  const std::size_t n = std::max(h, w);
  std::vector<std::size_t> v(n);
  std::vector<double> z(n + 1), line(n);
  std::vector<double> tmp(h * w);
  for (std::size_t c = 0; c < w; ++c) edt_1d(grid.data() + c, h, w, tmp.data() + c, v, z, line);
  for (std::size_t r = 0; r < h; ++r) edt_1d(tmp.data() + r * w, w, 1, grid.data() + r * w, v, z, line);
  for (double& d : grid) d = std::sqrt(d);
  return Tensor({1, h, w}, std::move(grid));
}

Tensor weight_map(const Tensor& boundary, double sigma, bool squared_distance) {
  if (!(sigma > 0.0)) throw DataError("weight_map: sigma must be positive");
  Tensor dist = edt(boundary);
  std::vector<double> out(dist.data().begin(), dist.data().end());
  const double s2 = sigma * sigma;
  for (double& d : out) d = std::exp(-(squared_distance ? d * d : d) / s2) + 1.0;
  return Tensor(dist.shape(), std::move(out));
}

Tensor weighted_bce(const Tensor& fg_prob, const Tensor& target, const Tensor& weight) {
  if (fg_prob.shape() != target.shape() || fg_prob.shape() != weight.shape()) {
    throw DimensionError("weighted_bce: shapes " + shape_str(fg_prob.shape()) + ", " + shape_str(target.shape()) +
                         ", " + shape_str(weight.shape()));
  }
  const std::size_t n = fg_prob.numel();
  auto p = fg_prob.data();
  std::vector<double> y(target.data().begin(), target.data().end());
  std::vector<double> wt(weight.data().begin(), weight.data().end());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double q = std::clamp(p[i], kClampLo, kClampHi);
    total += wt[i] * (y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q));
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return make_result({1}, {-total * inv_n}, {fg_prob}, [y, wt, inv_n](const detail::Node& o) {
    auto& in = *o.parents[0];
    double* g = in.grad_buffer();
    if (!g) return;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double q = in.data[i];
      if (q < kClampLo || q > kClampHi) continue;
      g[i] += -o.grad[0] * inv_n * wt[i] * (y[i] / q - (1.0 - y[i]) / (1.0 - q));
    }
  });
}

Tensor prediction_loss(const PredictionMap& pred, const Tensor& target, const Tensor& weight) {
  return weighted_bce(slice_channels(pred.probs, 0, 1), target, weight);
}

Tensor binarize_prior(const PredictionMap& prior, std::size_t h, std::size_t w) {
  const std::size_t ph = prior.height(), pw = prior.width();
  std::vector<double> out(ph * pw);
  auto probs = prior.probs.data();
  for (std::size_t p = 0; p < ph * pw; ++p) out[p] = probs[p] >= 0.5 ? 1.0 : 0.0;
  Tensor mask({1, ph, pw}, std::move(out));
  if (ph == h && pw == w) return mask;
  return downsample_label(mask, h, w);
}

}  // namespace pemp
