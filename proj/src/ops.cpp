#include "pemp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "pemp/rng.hpp"

namespace pemp {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Eigen chooses vectorized kernels by pointer alignment, so products read and
// write aligned copies to keep results bit-identical across allocations.
RowMat aligned(const double* p, std::size_t rows, std::size_t cols) { return ConstMapMat(p, rows, cols); }

detail::Node& parent(const detail::Node& out, std::size_t i) { return *out.parents[i]; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](const detail::Node& o) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (double* g = parent(o, k).grad_buffer()) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (double* g = parent(o, 1).grad_buffer()) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](const detail::Node& o) {
    auto& pa = parent(o, 0);
    auto& pb = parent(o, 1);
    if (double* g = pa.grad_buffer()) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pb.data[i];
    }
    if (double* g = pb.grad_buffer()) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {a}, [s](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += s * o.grad[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v += s;
  return make_result(a.shape(), std::move(out), {a}, [](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(a.shape(), std::move(out), {a}, [](const detail::Node& o) {
    auto& p = parent(o, 0);
    if (double* g = p.grad_buffer()) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (p.data[i] > 0.0) g[i] += o.grad[i];
      }
    }
  });
}

Tensor exp(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = std::exp(v);
  return make_result(a.shape(), std::move(out), {a}, [](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * o.data[i];
    }
  });
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v = std::log(v);
  return make_result(a.shape(), std::move(out), {a}, [](const detail::Node& o) {
    auto& p = parent(o, 0);
    if (double* g = p.grad_buffer()) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] / p.data[i];
    }
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({1}, {s}, {a}, [](const detail::Node& o) {
    auto& p = parent(o, 0);
    if (double* g = p.grad_buffer()) {
      for (std::size_t i = 0; i < p.data.size(); ++i) g[i] += o.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), {a},
                     [](const detail::Node& o) {
                       if (double* g = parent(o, 0).grad_buffer()) {
                         for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return make_result({n, m}, std::move(out), {a}, [m, n](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  const RowMat prod = aligned(a.data().data(), m, k) * aligned(b.data().data(), k, n);
  std::copy_n(prod.data(), m * n, out.begin());
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](const detail::Node& o) {
    auto& pa = parent(o, 0);
    auto& pb = parent(o, 1);
    const RowMat go = aligned(o.grad.data(), m, n);
    if (double* g = pa.grad_buffer()) {
      const RowMat d = go * aligned(pb.data.data(), k, n).transpose();
      MapMat(g, m, k) += d;
    }
    if (double* g = pb.grad_buffer()) {
      const RowMat d = aligned(pa.data.data(), m, k).transpose() * go;
      MapMat(g, k, n) += d;
    }
  });
}

std::size_t conv_output_size(std::size_t in, std::size_t k, const Conv2dOptions& opt) {
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(opt.dilation * (k - 1) + 1);
  const std::ptrdiff_t padded = static_cast<std::ptrdiff_t>(in + 2 * opt.pad);
  if (padded < span) throw DimensionError("conv2d: kernel extent exceeds padded input");
  return static_cast<std::size_t>(padded - span) / opt.stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t cin, h, w, k, oh, ow;
  Conv2dOptions opt;

  std::size_t rows() const { return cin * k * k; }
  std::size_t cols() const { return oh * ow; }
};

void im2col(const double* in, const ConvGeometry& g, double* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(g.opt.pad);
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    const double* plane = in + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
        double* row = cols + r * g.cols();
        const auto dy = static_cast<std::ptrdiff_t>(ky * g.opt.dilation) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx * g.opt.dilation) - pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.opt.stride) + dy;
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = plane + iy * static_cast<std::ptrdiff_t>(g.w);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.opt.stride) + dx;
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* in_grad) {
  const auto pad = static_cast<std::ptrdiff_t>(g.opt.pad);
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    double* plane = in_grad + c * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx, ++r) {
        const double* row = cols + r * g.cols();
        const auto dy = static_cast<std::ptrdiff_t>(ky * g.opt.dilation) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx * g.opt.dilation) - pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.opt.stride) + dy;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = plane + iy * static_cast<std::ptrdiff_t>(g.w);
          const double* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.opt.stride) + dx;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Conv2dOptions opt) {
  require_rank(input, 3, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != input.dim(0)) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, input has " + std::to_string(input.dim(0)));
  }
  if (kernel.dim(3) != k || k % 2 == 0) throw DimensionError("conv2d: kernel must be square and odd");
  if (opt.stride < 1 || opt.dilation < 1) throw DimensionError("conv2d: stride and dilation must be >= 1");
  if (bias.defined() && bias.shape() != Shape{cout}) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));
  }

  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), k, 0, 0, opt};
  g.oh = conv_output_size(g.h, k, opt);
  g.ow = conv_output_size(g.w, k, opt);

  auto cols = std::make_shared<RowMat>(g.rows(), g.cols());
  im2col(input.data().data(), g, cols->data());

  std::vector<double> out(cout * g.cols());
  const RowMat prod = aligned(kernel.data().data(), cout, g.rows()) * *cols;
  std::copy_n(prod.data(), out.size(), out.begin());
  if (bias.defined()) {
    auto b = bias.data();
    MapMat res(out.data(), cout, g.cols());
    for (std::size_t c = 0; c < cout; ++c) res.row(c).array() += b[c];
  }

  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result({cout, g.oh, g.ow}, std::move(out), inputs,
                     [g, cout, cols, has_bias](const detail::Node& o) {
                       const RowMat go = aligned(o.grad.data(), cout, g.cols());
                       auto& pin = parent(o, 0);
                       auto& pk = parent(o, 1);
                       if (double* gk = pk.grad_buffer()) {
                         const RowMat d = go * cols->transpose();
                         MapMat(gk, cout, g.rows()) += d;
                       }
                       if (double* gi = pin.grad_buffer()) {
                         const RowMat dcols = aligned(pk.data.data(), cout, g.rows()).transpose() * go;
                         col2im(dcols.data(), g, gi);
                       }
                       if (has_bias) {
                         if (double* gb = parent(o, 2).grad_buffer()) {
                           const double* row = o.grad.data();
                           for (std::size_t c = 0; c < cout; ++c, row += g.cols()) {
                             double acc = 0.0;
                             for (std::size_t i = 0; i < g.cols(); ++i) acc += row[i];
                             gb[c] += acc;
                           }
                         }
                       }
                     });
}

Tensor avg_pool2(const Tensor& x) {
  require_rank(x, 3, "avg_pool2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2) throw DimensionError("avg_pool2: odd spatial size " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(c * oh * ow);
  auto in = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* p = in.data() + (ch * h + 2 * y) * w + 2 * xx;
        out[(ch * oh + y) * ow + xx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  return make_result({c, oh, ow}, std::move(out), {x}, [c, h, w, oh, ow](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const double v = 0.25 * o.grad[(ch * oh + y) * ow + xx];
            double* p = g + (ch * h + 2 * y) * w + 2 * xx;
            p[0] += v;
            p[1] += v;
            p[w] += v;
            p[w + 1] += v;
          }
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;

  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.dim(axis) * inner;
    auto src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * row, row, out.data() + o * out_row + off);
    }
    off += row;
  }
  return make_result(out_shape, std::move(out), parts,
                     [offsets, outer, inner, out_row, axis](const detail::Node& o) {
                       for (std::size_t k = 0; k < o.parents.size(); ++k) {
                         auto& p = parent(o, k);
                         double* g = p.grad_buffer();
                         if (!g) continue;
                         const std::size_t row = p.shape[axis] * inner;
                         for (std::size_t r = 0; r < outer; ++r) {
                           const double* src = o.grad.data() + r * out_row + offsets[k];
                           double* dst = g + r * row;
                           for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor concat_channels(const std::vector<Tensor>& parts) { return concat(parts, 0); }

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 1 || begin >= end || end > x.dim(0)) {
    throw DimensionError("slice_channels: bad range for shape " + shape_str(x.shape()));
  }
  const std::size_t inner = x.numel() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = end - begin;
  std::vector<double> out(x.data().begin() + begin * inner, x.data().begin() + end * inner);
  return make_result(out_shape, std::move(out), {x}, [begin, inner](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      double* dst = g + begin * inner;
      for (std::size_t i = 0; i < o.grad.size(); ++i) dst[i] += o.grad[i];
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t n = s[axis];
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  return make_result(s, std::move(out), {x}, [outer, inner, n](const detail::Node& o) {
    double* g = parent(o, 0).grad_buffer();
    if (!g) return;
    for (std::size_t oo = 0; oo < outer; ++oo) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = oo * n * inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += o.grad[base + j * inner] * o.data[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

ArgMax max_over_channels(const Tensor& x) {
  require_rank(x, 3, "max_over_channels");
  const std::size_t m = x.dim(0), h = x.dim(1), w = x.dim(2), hw = h * w;
  auto in = x.data();
  std::vector<double> out(hw);
  std::vector<int> idx(hw, 0);
  for (std::size_t p = 0; p < hw; ++p) {
    double best = in[p];
    for (std::size_t j = 1; j < m; ++j) {
      if (in[j * hw + p] > best) {
        best = in[j * hw + p];
        idx[p] = static_cast<int>(j);
      }
    }
    out[p] = best;
  }
  Tensor values = make_result({1, h, w}, std::move(out), {x}, [idx, hw](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t p = 0; p < hw; ++p) g[static_cast<std::size_t>(idx[p]) * hw + p] += o.grad[p];
    }
  });
  return {values, std::move(idx)};
}

Tensor mul_spatial(const Tensor& x, const Tensor& m) {
  require_rank(x, 3, "mul_spatial");
  if (m.shape() != Shape{1, x.dim(1), x.dim(2)}) {
    throw DimensionError("mul_spatial: mask shape " + shape_str(m.shape()) + " vs " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  auto xv = x.data(), mv = m.data();
  std::vector<double> out(xv.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] = xv[ch * hw + p] * mv[p];
  return make_result(x.shape(), std::move(out), {x, m}, [c, hw](const detail::Node& o) {
    auto& px = parent(o, 0);
    auto& pm = parent(o, 1);
    if (double* g = px.grad_buffer()) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) g[ch * hw + p] += o.grad[ch * hw + p] * pm.data[p];
    }
    if (double* g = pm.grad_buffer()) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) g[p] += o.grad[ch * hw + p] * px.data[ch * hw + p];
    }
  });
}

Tensor broadcast_spatial(const Tensor& v, std::size_t h, std::size_t w) {
  require_rank(v, 1, "broadcast_spatial");
  const std::size_t c = v.dim(0), hw = h * w;
  std::vector<double> out(c * hw);
  auto in = v.data();
  for (std::size_t ch = 0; ch < c; ++ch) std::fill_n(out.data() + ch * hw, hw, in[ch]);
  return make_result({c, h, w}, std::move(out), {v}, [c, hw](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) s += o.grad[ch * hw + p];
        g[ch] += s;
      }
    }
  });
}

namespace {

std::vector<double> mask_values(const Tensor& x, const Tensor& mask, const char* op) {
  const std::size_t hw = x.dim(1) * x.dim(2);
  if (!mask.defined()) return std::vector<double>(hw, 1.0);
  if (mask.shape() != Shape{1, x.dim(1), x.dim(2)}) {
    throw DimensionError(std::string(op) + ": mask shape " + shape_str(mask.shape()) + " vs " +
                         shape_str(x.shape()));
  }
  return {mask.data().begin(), mask.data().end()};
}

}  // namespace

Tensor spatial_mean(const Tensor& x, const Tensor& mask, double denom) {
  require_rank(x, 3, "spatial_mean");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  auto m = mask_values(x, mask, "spatial_mean");
  if (denom <= 0.0) denom = static_cast<double>(hw);
  auto in = x.data();
  std::vector<double> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t p = 0; p < hw; ++p) s += in[ch * hw + p] * m[p];
    out[ch] = s / denom;
  }
  return make_result({c}, std::move(out), {x}, [c, hw, m, denom](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) g[ch * hw + p] += o.grad[ch] * m[p] / denom;
    }
  });
}

Tensor spatial_max(const Tensor& x, const Tensor& mask) {
  require_rank(x, 3, "spatial_max");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  auto m = mask_values(x, mask, "spatial_max");
  auto in = x.data();
  std::vector<double> out(c);
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double best = in[ch * hw] * m[0];
    for (std::size_t p = 1; p < hw; ++p) {
      const double v = in[ch * hw + p] * m[p];
      if (v > best) {
        best = v;
        arg[ch] = p;
      }
    }
    out[ch] = best;
  }
  return make_result({c}, std::move(out), {x}, [c, hw, m, arg](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t ch = 0; ch < c; ++ch) g[ch * hw + arg[ch]] += o.grad[ch] * m[arg[ch]];
    }
  });
}

namespace {

void require_feature_proto_pair(const Tensor& features, const Tensor& protos, const char* op) {
  require_rank(features, 3, op);
  require_rank(protos, 2, op);
  if (protos.dim(1) != features.dim(0)) {
    throw DimensionError(std::string(op) + ": prototype dim " + std::to_string(protos.dim(1)) +
                         " vs feature channels " + std::to_string(features.dim(0)));
  }
}

}  // namespace

Tensor cosine_similarity_map(const Tensor& features, const Tensor& protos) {
  require_feature_proto_pair(features, protos, "cosine_similarity_map");
  const std::size_t d = features.dim(0), h = features.dim(1), w = features.dim(2), hw = h * w;
  const std::size_t m = protos.dim(0);
  const RowMat f = aligned(features.data().data(), d, hw);
  const RowMat q = aligned(protos.data().data(), m, d);
  Eigen::VectorXd nf = Eigen::VectorXd::Zero(hw), nq = Eigen::VectorXd::Zero(m);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t p = 0; p < hw; ++p) nf[p] += f(c, p) * f(c, p);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t c = 0; c < d; ++c) nq[j] += q(j, c) * q(j, c);
  nf = nf.cwiseSqrt();
  nq = nq.cwiseSqrt();
  const RowMat prod = q * f;
  std::vector<double> out(prod.data(), prod.data() + m * hw);
  MapMat cos(out.data(), m, hw);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t p = 0; p < hw; ++p) {
      const double denom = nq[j] * nf[p];
      cos(j, p) = denom > 0.0 ? cos(j, p) / denom : 0.0;
    }
  return make_result({m, h, w}, std::move(out), {features, protos},
                     [d, hw, m, nf, nq](const detail::Node& o) {
                       auto& pf = parent(o, 0);
                       auto& pq = parent(o, 1);
                       const RowMat fv = aligned(pf.data.data(), d, hw);
                       const RowMat qv = aligned(pq.data.data(), m, d);
                       ConstMapMat cosv(o.data.data(), m, hw);
                       ConstMapMat gv(o.grad.data(), m, hw);
                       RowMat a(m, hw);
                       Eigen::VectorXd bf = Eigen::VectorXd::Zero(hw);
                       Eigen::VectorXd cq = Eigen::VectorXd::Zero(m);
                       for (std::size_t j = 0; j < m; ++j)
                         for (std::size_t p = 0; p < hw; ++p) {
                           const double denom = nq[j] * nf[p];
                           if (denom > 0.0) {
                             a(j, p) = gv(j, p) / denom;
                             const double gc = gv(j, p) * cosv(j, p);
                             bf[p] += gc / (nf[p] * nf[p]);
                             cq[j] += gc / (nq[j] * nq[j]);
                           } else {
                             a(j, p) = 0.0;
                           }
                         }
                       if (double* g = pf.grad_buffer()) {
                         const RowMat d_f = qv.transpose() * a - fv * bf.asDiagonal();
                         MapMat(g, d, hw) += d_f;
                       }
                       if (double* g = pq.grad_buffer()) {
                         const RowMat d_q = a * fv.transpose() - cq.asDiagonal() * qv;
                         MapMat(g, m, d) += d_q;
                       }
                     });
}

Tensor euclidean_distance_map(const Tensor& features, const Tensor& protos) {
  require_feature_proto_pair(features, protos, "euclidean_distance_map");
  const std::size_t d = features.dim(0), h = features.dim(1), w = features.dim(2), hw = h * w;
  const std::size_t m = protos.dim(0);
  auto f = features.data(), q = protos.data();
  std::vector<double> out(m * hw);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t p = 0; p < hw; ++p) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = f[c * hw + p] - q[j * d + c];
        s += diff * diff;
      }
      out[j * hw + p] = std::sqrt(s);
    }
  }
  return make_result({m, h, w}, std::move(out), {features, protos}, [d, hw, m](const detail::Node& o) {
    auto& pf = parent(o, 0);
    auto& pq = parent(o, 1);
    double* gf = pf.grad_buffer();
    double* gq = pq.grad_buffer();
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t p = 0; p < hw; ++p) {
        const double dist = o.data[j * hw + p];
        if (dist <= 0.0) continue;
        const double s = o.grad[j * hw + p] / dist;
        for (std::size_t c = 0; c < d; ++c) {
          const double v = s * (pf.data[c * hw + p] - pq.data[j * d + c]);
          if (gf) gf[c * hw + p] += v;
          if (gq) gq[j * d + c] -= v;
        }
      }
    }
  });
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize: empty target");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return reshape(x, x.shape());
  auto ty = bilinear_taps(h, out_h);
  auto tx = bilinear_taps(w, out_w);
  auto in = x.data();
  std::vector<double> out(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = in.data() + ch * h * w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const Tap& a = ty[y];
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const Tap& b = tx[xx];
        const double top = plane[a.i0 * w + b.i0] * (1 - b.w1) + plane[a.i0 * w + b.i1] * b.w1;
        const double bot = plane[a.i1 * w + b.i0] * (1 - b.w1) + plane[a.i1 * w + b.i1] * b.w1;
        out[(ch * out_h + y) * out_w + xx] = top * (1 - a.w1) + bot * a.w1;
      }
    }
  }
  return make_result({c, out_h, out_w}, std::move(out), {x},
                     [c, h, w, out_h, out_w, ty, tx](const detail::Node& o) {
                       double* g = parent(o, 0).grad_buffer();
                       if (!g) return;
                       for (std::size_t ch = 0; ch < c; ++ch) {
                         double* plane = g + ch * h * w;
                         for (std::size_t y = 0; y < out_h; ++y) {
                           const Tap& a = ty[y];
                           for (std::size_t xx = 0; xx < out_w; ++xx) {
                             const Tap& b = tx[xx];
                             const double v = o.grad[(ch * out_h + y) * out_w + xx];
                             plane[a.i0 * w + b.i0] += v * (1 - a.w1) * (1 - b.w1);
                             plane[a.i0 * w + b.i1] += v * (1 - a.w1) * b.w1;
                             plane[a.i1 * w + b.i0] += v * a.w1 * (1 - b.w1);
                             plane[a.i1 * w + b.i1] += v * a.w1 * b.w1;
                           }
                         }
                       }
                     });
}

Tensor dropout_channels(const Tensor& x, double rate, const ForwardContext& ctx) {
  if (!ctx.training() || rate <= 0.0) return x;
  if (rate >= 1.0) throw DimensionError("dropout rate must be < 1");
  if (!ctx.rng) throw GraphError("dropout in train mode needs an rng");
  require_rank(x, 3, "dropout_channels");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<double> keep(c);
  for (auto& k : keep) k = uniform01(*ctx.rng) < rate ? 0.0 : 1.0 / (1.0 - rate);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[ch * hw + p] = in[ch * hw + p] * keep[ch];
  return make_result(x.shape(), std::move(out), {x}, [keep, hw](const detail::Node& o) {
    if (double* g = parent(o, 0).grad_buffer()) {
      for (std::size_t ch = 0; ch < keep.size(); ++ch)
        for (std::size_t p = 0; p < hw; ++p) g[ch * hw + p] += o.grad[ch * hw + p] * keep[ch];
    }
  });
}

}  // namespace pemp
