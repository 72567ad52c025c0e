#include "seqseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "seqseg/errors.hpp"
#include "seqseg/parallel.hpp"

namespace seqseg {

namespace {

using MatRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using ConstMapRM = Eigen::Map<const MatRM>;

struct ConvGeometry {
  int in_c, in_h, in_w;
  int kh, kw, stride, pad_h, pad_w;
  int out_h, out_w;

  int patch() const { return in_c * kh * kw; }
  int pixels() const { return out_h * out_w; }
  bool is_pointwise() const {
    return kh == 1 && kw == 1 && stride == 1 && pad_h == 0 && pad_w == 0;
  }
};

ConvGeometry conv_geometry(const Shape4& in, const KernelBank& k, int stride,
                           Padding padding) {
  SEQSEG_REQUIRE(in.c == k.in_channels(),
                 "conv2d: input has " + std::to_string(in.c) +
                     " channels, kernel expects " +
                     std::to_string(k.in_channels()));
  SEQSEG_REQUIRE(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  ConvGeometry g{};
  g.in_c = in.c;
  g.in_h = in.h;
  g.in_w = in.w;
  g.kh = k.kernel_h();
  g.kw = k.kernel_w();
  g.stride = stride;
  g.pad_h = padding == Padding::same ? (g.kh - 1) / 2 : 0;
  g.pad_w = padding == Padding::same ? (g.kw - 1) / 2 : 0;
  g.out_h = (in.h + 2 * g.pad_h - g.kh) / stride + 1;
  g.out_w = (in.w + 2 * g.pad_w - g.kw) / stride + 1;
  SEQSEG_REQUIRE(g.out_h >= 1 && g.out_w >= 1,
                 "conv2d: kernel larger than valid input");
  return g;
}

void im2col(const double* in, const ConvGeometry& g, double* cols) {
  const int pixels = g.pixels();
  for (int ic = 0; ic < g.in_c; ++ic) {
    const double* plane = in + static_cast<std::size_t>(ic) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        double* row =
            cols + static_cast<std::size_t>((ic * g.kh + ky) * g.kw + kx) * pixels;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad_h + ky;
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= g.in_h) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad_w + kx;
            dst[ox] = (ix < 0 || ix >= g.in_w) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* in) {
  const int pixels = g.pixels();
  for (int ic = 0; ic < g.in_c; ++ic) {
    double* plane = in + static_cast<std::size_t>(ic) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const double* row =
            cols + static_cast<std::size_t>((ic * g.kh + ky) * g.kw + kx) * pixels;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad_h + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          const double* src = row + oy * g.out_w;
          double* dst = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.pad_w + kx;
            if (ix >= 0 && ix < g.in_w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct AxisWeights {
  std::vector<int> lo, hi;
  std::vector<double> w_lo, w_hi;
};

AxisWeights bilinear_axis(int in_size, int factor) {
  const int out_size = in_size * factor;
  AxisWeights a;
  a.lo.resize(out_size);
  a.hi.resize(out_size);
  a.w_lo.resize(out_size);
  a.w_hi.resize(out_size);
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in_size - 1) i0 = in_size - 1;
    const int i1 = std::min(i0 + 1, in_size - 1);
    const double frac = src - i0;
    a.lo[o] = i0;
    a.hi[o] = i1;
    a.w_lo[o] = 1.0 - frac;
    a.w_hi[o] = frac;
  }
  return a;
}

void check_factor(int factor) {
  if (factor != 2 && factor != 4 && factor != 8)
    throw ConfigError("bilinear_upsample: factor must be 2, 4 or 8, got " +
                      std::to_string(factor));
}

}  // namespace

// ---- conv2d ---------------------------------------------------------------

Shape4 conv2d_output_shape(const Shape4& in, const KernelBank& k, int stride,
                           Padding padding) {
  const ConvGeometry g = conv_geometry(in, k, stride, padding);
  return {in.n, k.out_channels(), g.out_h, g.out_w};
}

Tensor4 conv2d(const Tensor4& input, const KernelBank& k, int stride,
               Padding padding) {
  const ConvGeometry g = conv_geometry(input.shape(), k, stride, padding);
  require_finite(input, "conv2d input");
  const int out_c = k.out_channels();
  Tensor4 out(Shape4{input.n(), out_c, g.out_h, g.out_w});
  ConstMapRM weights(k.weights.data(), out_c, g.patch());

  parallel_for(static_cast<std::size_t>(input.n()), [&](std::size_t n) {
    const double* in = input.plane(static_cast<int>(n), 0);
    MapRM result(out.plane(static_cast<int>(n), 0), out_c, g.pixels());
    if (g.is_pointwise()) {
      result.noalias() = weights * ConstMapRM(in, g.in_c, g.pixels());
    } else {
      MatRM cols(g.patch(), g.pixels());
      im2col(in, g, cols.data());
      result.noalias() = weights * cols;
    }
    if (k.has_bias()) {
      for (int oc = 0; oc < out_c; ++oc) result.row(oc).array() += k.bias[oc];
    }
  });
  return out;
}

Tensor4 conv2d_backward(const Tensor4& input, const KernelBank& k,
                        const Tensor4& d_out, KernelBank& d_kernel, int stride,
                        Padding padding, bool need_input_grad) {
  const ConvGeometry g = conv_geometry(input.shape(), k, stride, padding);
  const int out_c = k.out_channels();
  SEQSEG_REQUIRE(d_out.shape() == (Shape4{input.n(), out_c, g.out_h, g.out_w}),
                 "conv2d_backward: d_out shape mismatch");
  SEQSEG_REQUIRE(d_kernel.weights.shape() == k.weights.shape() &&
                     d_kernel.bias.size() == k.bias.size(),
                 "conv2d_backward: gradient bank shape mismatch");
  ConstMapRM weights(k.weights.data(), out_c, g.patch());

  const auto batch = static_cast<std::size_t>(input.n());
  std::vector<MatRM> partial_w(batch);
  std::vector<Eigen::VectorXd> partial_b(batch);
  Tensor4 d_input;
  if (need_input_grad) d_input = Tensor4::zeros_like(input);

  parallel_for(batch, [&](std::size_t n) {
    const int ni = static_cast<int>(n);
    const double* in = input.plane(ni, 0);
    ConstMapRM grad(d_out.plane(ni, 0), out_c, g.pixels());
    if (g.is_pointwise()) {
      ConstMapRM cols(in, g.in_c, g.pixels());
      partial_w[n] = grad * cols.transpose();
      if (need_input_grad) {
        MapRM(d_input.plane(ni, 0), g.in_c, g.pixels()).noalias() =
            weights.transpose() * grad;
      }
    } else {
      MatRM cols(g.patch(), g.pixels());
      im2col(in, g, cols.data());
      partial_w[n] = grad * cols.transpose();
      if (need_input_grad) {
        MatRM d_cols = weights.transpose() * grad;
        col2im_add(d_cols.data(), g, d_input.plane(ni, 0));
      }
    }
    if (k.has_bias()) {
      partial_b[n].setZero(out_c);
      for (int oc = 0; oc < out_c; ++oc) {
        const double* row = d_out.plane(ni, oc);
        double acc = 0.0;
        for (std::size_t p = 0; p < g.pixels(); ++p) acc += row[p];
        partial_b[n][oc] = acc;
      }
    }
  });

  MapRM d_weights(d_kernel.weights.data(), out_c, g.patch());
  for (std::size_t n = 0; n < batch; ++n) {
    d_weights += partial_w[n];
    if (k.has_bias()) {
      for (int oc = 0; oc < out_c; ++oc) d_kernel.bias[oc] += partial_b[n][oc];
    }
  }
  return d_input;
}

// ---- maxpool2 ---------------------------------------------------------------

PoolResult maxpool2(const Tensor4& input) {
  const Shape4 s = input.shape();
  const int oh = (s.h + 1) / 2;
  const int ow = (s.w + 1) / 2;
  PoolResult r;
  r.in_shape = s;
  r.out = Tensor4(Shape4{s.n, s.c, oh, ow});
  r.argmax.resize(r.out.size());
  std::size_t o = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* plane = input.plane(n, c);
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::int32_t best_idx = -1;
          for (int dy = 0; dy < 2; ++dy) {
            const int iy = 2 * y + dy;
            if (iy >= s.h) continue;
            for (int dx = 0; dx < 2; ++dx) {
              const int ix = 2 * x + dx;
              if (ix >= s.w) continue;
              const double v = plane[iy * s.w + ix];
              if (best_idx < 0 || v > best) {
                best = v;
                best_idx = iy * s.w + ix;
              }
            }
          }
          r.out.data()[o] = best;
          r.argmax[o] = best_idx;
        }
      }
    }
  }
  return r;
}

Tensor4 maxpool2_backward(const PoolResult& pool, const Tensor4& d_out) {
  SEQSEG_REQUIRE(d_out.shape() == pool.out.shape(),
                 "maxpool2_backward: d_out shape mismatch");
  Tensor4 d_in(pool.in_shape);
  const Shape4 os = pool.out.shape();
  std::size_t o = 0;
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      double* plane = d_in.plane(n, c);
      for (std::size_t i = 0; i < os.plane(); ++i, ++o)
        plane[pool.argmax[o]] += d_out.data()[o];
    }
  }
  return d_in;
}

// ---- bilinear upsampling ----------------------------------------------------

Tensor4 bilinear_upsample(const Tensor4& input, int factor) {
  check_factor(factor);
  const Shape4 s = input.shape();
  const AxisWeights ay = bilinear_axis(s.h, factor);
  const AxisWeights ax = bilinear_axis(s.w, factor);
  const int oh = s.h * factor;
  const int ow = s.w * factor;
  Tensor4 out(Shape4{s.n, s.c, oh, ow});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const double* in = input.plane(n, c);
      double* dst = out.plane(n, c);
      for (int y = 0; y < oh; ++y) {
        const double* r0 = in + static_cast<std::size_t>(ay.lo[y]) * s.w;
        const double* r1 = in + static_cast<std::size_t>(ay.hi[y]) * s.w;
        for (int x = 0; x < ow; ++x) {
          const double top = ax.w_lo[x] * r0[ax.lo[x]] + ax.w_hi[x] * r0[ax.hi[x]];
          const double bot = ax.w_lo[x] * r1[ax.lo[x]] + ax.w_hi[x] * r1[ax.hi[x]];
          dst[y * ow + x] = ay.w_lo[y] * top + ay.w_hi[y] * bot;
        }
      }
    }
  }
  return out;
}

Tensor4 bilinear_upsample_backward(const Tensor4& d_out, int factor,
                                   const Shape4& in_shape) {
  check_factor(factor);
  const int oh = in_shape.h * factor;
  const int ow = in_shape.w * factor;
  SEQSEG_REQUIRE(d_out.shape() == (Shape4{in_shape.n, in_shape.c, oh, ow}),
                 "bilinear_upsample_backward: d_out shape mismatch");
  const AxisWeights ay = bilinear_axis(in_shape.h, factor);
  const AxisWeights ax = bilinear_axis(in_shape.w, factor);
  Tensor4 d_in(in_shape);
  for (int n = 0; n < in_shape.n; ++n) {
    for (int c = 0; c < in_shape.c; ++c) {
      const double* g = d_out.plane(n, c);
      double* dst = d_in.plane(n, c);
      for (int y = 0; y < oh; ++y) {
        double* r0 = dst + static_cast<std::size_t>(ay.lo[y]) * in_shape.w;
        double* r1 = dst + static_cast<std::size_t>(ay.hi[y]) * in_shape.w;
        for (int x = 0; x < ow; ++x) {
          const double v = g[y * ow + x];
          const double top = ay.w_lo[y] * v;
          const double bot = ay.w_hi[y] * v;
          r0[ax.lo[x]] += ax.w_lo[x] * top;
          r0[ax.hi[x]] += ax.w_hi[x] * top;
          r1[ax.lo[x]] += ax.w_lo[x] * bot;
          r1[ax.hi[x]] += ax.w_hi[x] * bot;
        }
      }
    }
  }
  return d_in;
}

// ---- batch normalization ---------------------------------------------------

BatchNormParams::BatchNormParams(int channels)
    : gamma(channels, 1.0),
      beta(channels, 0.0),
      running_mean(channels, 0.0),
      running_var(channels, 1.0) {}

Tensor4 batchnorm(const Tensor4& input, const BatchNormParams& p, Phase phase,
                  BatchNormCache* cache) {
  const Shape4 s = input.shape();
  SEQSEG_REQUIRE(s.c == p.channels(),
                 "batchnorm: input has " + std::to_string(s.c) +
                     " channels, params have " + std::to_string(p.channels()));
  const std::size_t count = static_cast<std::size_t>(s.n) * s.plane();
  BatchNormCache local;
  BatchNormCache& bc = cache ? *cache : local;
  bc.phase = phase;
  bc.count = count;
  bc.mean.assign(s.c, 0.0);
  bc.var.assign(s.c, 0.0);
  bc.inv_std.assign(s.c, 0.0);
  bc.x_hat = Tensor4(s);
  Tensor4 out(s);

  for (int c = 0; c < s.c; ++c) {
    double mean = p.running_mean[c];
    double var = p.running_var[c];
    if (phase == Phase::train) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* x = input.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) sum += x[i];
      }
      mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const double* x = input.plane(n, c);
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const double d = x[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
    }
    const double inv_std = 1.0 / std::sqrt(var + p.eps);
    bc.mean[c] = mean;
    bc.var[c] = var;
    bc.inv_std[c] = inv_std;
    for (int n = 0; n < s.n; ++n) {
      const double* x = input.plane(n, c);
      double* xh = bc.x_hat.plane(n, c);
      double* y = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        xh[i] = (x[i] - mean) * inv_std;
        y[i] = p.gamma[c] * xh[i] + p.beta[c];
      }
    }
  }
  return out;
}

void update_running_stats(BatchNormParams& p, const BatchNormCache& cache) {
  SEQSEG_REQUIRE(cache.phase == Phase::train,
                 "update_running_stats needs a train-phase cache");
  const double m = p.momentum;
  const double unbias =
      cache.count > 1 ? static_cast<double>(cache.count) / (cache.count - 1) : 1.0;
  for (int c = 0; c < p.channels(); ++c) {
    p.running_mean[c] = (1.0 - m) * p.running_mean[c] + m * cache.mean[c];
    p.running_var[c] = (1.0 - m) * p.running_var[c] + m * cache.var[c] * unbias;
  }
}

Tensor4 batchnorm_backward(const BatchNormParams& p,
                           const BatchNormCache& cache, const Tensor4& d_out,
                           BatchNormParams& grads) {
  const Shape4 s = d_out.shape();
  SEQSEG_REQUIRE(s == cache.x_hat.shape(), "batchnorm_backward: shape mismatch");
  Tensor4 d_in(s);
  const double count = static_cast<double>(cache.count);
  for (int c = 0; c < s.c; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const double* dy = d_out.plane(n, c);
      const double* xh = cache.x_hat.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xh[i];
      }
    }
    grads.gamma[c] += sum_dy_xhat;
    grads.beta[c] += sum_dy;
    const double g = p.gamma[c] * cache.inv_std[c];
    for (int n = 0; n < s.n; ++n) {
      const double* dy = d_out.plane(n, c);
      const double* xh = cache.x_hat.plane(n, c);
      double* dx = d_in.plane(n, c);
      if (cache.phase == Phase::train) {
        for (std::size_t i = 0; i < s.plane(); ++i)
          dx[i] = g * (dy[i] - sum_dy / count - xh[i] * sum_dy_xhat / count);
      } else {
        for (std::size_t i = 0; i < s.plane(); ++i) dx[i] = g * dy[i];
      }
    }
  }
  return d_in;
}

// ---- pointwise / softmax ---------------------------------------------------

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor4 pointwise(const Tensor4& input, Activation f) {
  Tensor4 out(input.shape());
  const double* x = input.data();
  double* y = out.data();
  const std::size_t n = input.size();
  switch (f) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) y[i] = sigmoid(x[i]);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(x[i]);
      break;
  }
  return out;
}

Tensor4 pointwise_backward(const Tensor4& input, const Tensor4& output,
                           const Tensor4& d_out, Activation f) {
  SEQSEG_REQUIRE(input.shape() == d_out.shape() && output.shape() == d_out.shape(),
                 "pointwise_backward: shape mismatch");
  Tensor4 d_in(input.shape());
  const double* x = input.data();
  const double* y = output.data();
  const double* g = d_out.data();
  double* dx = d_in.data();
  const std::size_t n = input.size();
  switch (f) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) dx[i] = g[i] * y[i] * (1.0 - y[i]);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) dx[i] = g[i] * (1.0 - y[i] * y[i]);
      break;
  }
  return d_in;
}

Tensor4 softmax_channels(const Tensor4& logits) {
  const Shape4 s = logits.shape();
  Tensor4 out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, logits.plane(n, c)[i]);
      double sum = 0.0;
      for (int c = 0; c < s.c; ++c) {
        const double e = std::exp(logits.plane(n, c)[i] - mx);
        out.plane(n, c)[i] = e;
        sum += e;
      }
      for (int c = 0; c < s.c; ++c) out.plane(n, c)[i] /= sum;
    }
  }
  return out;
}

Tensor4 softmax_channels_backward(const Tensor4& probs, const Tensor4& d_out) {
  SEQSEG_REQUIRE(probs.shape() == d_out.shape(),
                 "softmax_channels_backward: shape mismatch");
  const Shape4 s = probs.shape();
  Tensor4 d_in(s);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      double inner = 0.0;
      for (int c = 0; c < s.c; ++c)
        inner += probs.plane(n, c)[i] * d_out.plane(n, c)[i];
      for (int c = 0; c < s.c; ++c)
        d_in.plane(n, c)[i] =
            probs.plane(n, c)[i] * (d_out.plane(n, c)[i] - inner);
    }
  }
  return d_in;
}

std::vector<std::uint8_t> argmax_channels(const Tensor4& logits) {
  const Shape4 s = logits.shape();
  std::vector<std::uint8_t> ids(static_cast<std::size_t>(s.n) * s.plane());
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < s.plane(); ++i) {
      int best = 0;
      double best_v = logits.plane(n, 0)[i];
      for (int c = 1; c < s.c; ++c) {
        const double v = logits.plane(n, c)[i];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      ids[static_cast<std::size_t>(n) * s.plane() + i] =
          static_cast<std::uint8_t>(best);
    }
  }
  return ids;
}

}  // namespace seqseg
