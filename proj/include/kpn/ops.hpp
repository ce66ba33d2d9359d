#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "kpn/tensor.hpp"

namespace kpn {

enum class Mode { train, eval };

namespace detail {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMapMat = Eigen::Map<const RowMat<Real>>;

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t pad, const char* what) {
  const long span = static_cast<long>(in) + 2 * static_cast<long>(pad) - static_cast<long>(kernel);
  if (span < 0 || stride == 0) {
    throw ConfigError(std::string(what) + ": kernel " + std::to_string(kernel) +
                      " does not fit input extent " + std::to_string(in) + " with pad " +
                      std::to_string(pad));
  }
  return static_cast<std::size_t>(span) / stride + 1;
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t positions() const { return out_h * out_w; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// One sample: image CxHxW -> columns (C*Kh*Kw) x (Ho*Wo).
// (m, c, pos) sample-major <-> (c, m * pos) channel-major.
template <typename Real>
void fold_channels(const Real* src, std::size_t c, std::size_t pos, std::size_t m, Real* dst) {
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t k = 0; k < c; ++k) std::copy_n(src + (s * c + k) * pos, pos, dst + (k * m + s) * pos);
  }
}

template <typename Real>
void unfold_channels(const Real* src, std::size_t c, std::size_t pos, std::size_t m, Real* dst) {
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t k = 0; k < c; ++k) std::copy_n(src + (k * m + s) * pos, pos, dst + (s * c + k) * pos);
  }
}

// Output columns [lo, hi) whose input column ox * stride + k - pad is inside the image.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t out, std::size_t in, std::size_t k,
                                                      std::size_t stride, std::size_t pad) {
  const long s = static_cast<long>(stride), off = static_cast<long>(k) - static_cast<long>(pad);
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(in) - off + s - 1) / s;  // first ox with ox * s + off >= in
  lo = std::clamp(lo, 0L, static_cast<long>(out));
  hi = std::clamp(hi, lo, static_cast<long>(out));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <typename Real>
auto plane_array(const Real* p, std::size_t n) {
  return Eigen::Map<const Eigen::Array<Real, Eigen::Dynamic, 1>>(p, static_cast<Eigen::Index>(n));
}

template <typename Real>
void im2col(const Real* image, const ConvGeometry& g, Real* cols) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        Real* row = cols + ((c * g.kh + ky) * g.kw + kx) * positions;
        const auto [lo, hi] = valid_span(g.out_w, g.width, kx, g.stride, g.pad);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          Real* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, Real(0));
            continue;
          }
          const Real* src = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width + kx - g.pad;
          std::fill(dst, dst + lo, Real(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.out_w, Real(0));
        }
      }
    }
  }
}

template <typename Real>
void col2im_add(const Real* cols, const ConvGeometry& g, Real* image) {
  const std::size_t positions = g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const Real* row = cols + ((c * g.kh + ky) * g.kw + kx) * positions;
        const auto [lo, hi] = valid_span(g.out_w, g.width, kx, g.stride, g.pad);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          Real* dst = image + (c * g.height + static_cast<std::size_t>(iy)) * g.width + kx - g.pad;
          const Real* src = row + oy * g.out_w;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

// Samples per conv GEMM: enough to fill roughly 4M column entries.
inline std::size_t conv_chunk(std::size_t n, std::size_t per_sample) {
  return std::clamp<std::size_t>((std::size_t{1} << 16) / std::max<std::size_t>(per_sample, 1), 1, std::max<std::size_t>(n, 1));
}

// im2col for m consecutive samples into a patch x (m * positions) matrix.
template <typename Real>
void gather_cols(const Real* images, const ConvGeometry& g, std::size_t m, Real* cols) {
  const std::size_t pos = g.positions(), in_plane = g.channels * g.height * g.width;
  if (g.pointwise()) {
    fold_channels(images, g.channels, pos, m, cols);
    return;
  }
  if (m == 1) {
    im2col(images, g, cols);
    return;
  }
  std::vector<Real> one(g.patch() * pos);
  for (std::size_t s = 0; s < m; ++s) {
    im2col(images + s * in_plane, g, one.data());
    for (std::size_t r = 0; r < g.patch(); ++r) {
      std::copy_n(one.data() + r * pos, pos, cols + r * m * pos + s * pos);
    }
  }
}

// Adjoint of gather_cols: accumulates a patch x (m * positions) matrix into m images.
template <typename Real>
void scatter_cols(const Real* cols, const ConvGeometry& g, std::size_t m, Real* images) {
  const std::size_t pos = g.positions(), in_plane = g.channels * g.height * g.width;
  if (g.pointwise()) {
    for (std::size_t s = 0; s < m; ++s) {
      for (std::size_t c = 0; c < g.channels; ++c) {
        const Real* src = cols + c * m * pos + s * pos;
        Real* dst = images + s * in_plane + c * pos;
        for (std::size_t i = 0; i < pos; ++i) dst[i] += src[i];
      }
    }
    return;
  }
  if (m == 1) {
    col2im_add(cols, g, images);
    return;
  }
  std::vector<Real> one(g.patch() * pos);
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t r = 0; r < g.patch(); ++r) {
      std::copy_n(cols + r * m * pos + s * pos, pos, one.data() + r * pos);
    }
    col2im_add(one.data(), g, images + s * in_plane);
  }
}

template <typename Real>
void require_rank(const Tensor<Real>& t, std::size_t rank, const char* op, const char* arg) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

}  // namespace detail

// NCHW convolution without bias. weight is OutC x InC x Kh x Kw.
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Tensor<Real>& weight, std::size_t stride,
                    std::size_t pad) {
  using namespace detail;
  require_rank(input, 4, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  if (input.extent(1) != weight.extent(1)) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) + " has " +
                     std::to_string(input.extent(1)) + " channels but weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.extent(1)));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  const std::size_t n = input.extent(0), out_c = weight.extent(0);
  ConvGeometry g{input.extent(1), input.extent(2), input.extent(3), weight.extent(2),
                 weight.extent(3), stride, pad, 0, 0};
  g.out_h = conv_out_extent(g.height, g.kh, stride, pad, "conv2d");
  g.out_w = conv_out_extent(g.width, g.kw, stride, pad, "conv2d");

  const std::size_t in_plane = g.channels * g.height * g.width;
  const std::size_t out_plane = out_c * g.positions();
  const std::size_t pos = g.positions();
  std::vector<Real> out(n * out_plane);
  // Samples are processed in chunks so each GEMM spans chunk * positions
  // columns: cols is patch x (chunk * positions), y is out_c x (chunk * positions).
  const std::size_t chunk = conv_chunk(n, g.patch() * pos);
  std::vector<Real> cols(g.patch() * pos * chunk), ybuf(out_c * pos * chunk);
  ConstMapMat<Real> w(weight.values().data(), out_c, g.patch());
  for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
    const std::size_t m = std::min(chunk, n - s0);
    gather_cols(input.values().data() + s0 * in_plane, g, m, cols.data());
    ConstMapMat<Real> col(cols.data(), g.patch(), m * pos);
    MapMat<Real> y(ybuf.data(), out_c, m * pos);
    y.noalias() = w * col;
    unfold_channels(ybuf.data(), out_c, pos, m, out.data() + s0 * out_plane);
  }

  return make_result<Real>(
      {n, out_c, g.out_h, g.out_w}, std::move(out), {input, weight},
      [g, n, out_c, in_plane, out_plane, chunk](TensorNode<Real>& self) {
        auto& x_node = *self.parents[0];
        auto& w_node = *self.parents[1];
        const std::size_t pos = g.positions();
        ConstMapMat<Real> w(w_node.value.data(), out_c, g.patch());
        std::vector<Real> cols(g.patch() * pos * chunk), dy_buf(out_c * pos * chunk);
        for (std::size_t s0 = 0; s0 < n; s0 += chunk) {
          const std::size_t m = std::min(chunk, n - s0);
          fold_channels(self.grad.data() + s0 * out_plane, out_c, pos, m, dy_buf.data());
          ConstMapMat<Real> dy(dy_buf.data(), out_c, m * pos);
          if (w_node.requires_grad) {
            gather_cols(x_node.value.data() + s0 * in_plane, g, m, cols.data());
            ConstMapMat<Real> col(cols.data(), g.patch(), m * pos);
            MapMat<Real> dw(w_node.grad_buffer().data(), out_c, g.patch());
            dw.noalias() += dy * col.transpose();
          }
          if (x_node.requires_grad) {
            MapMat<Real> dc(cols.data(), g.patch(), m * pos);
            dc.noalias() = w.transpose() * dy;
            scatter_cols(cols.data(), g, m, x_node.grad_buffer().data() + s0 * in_plane);
          }
        }
      });
}

// Running statistics owned by a batch-norm layer. Updated in train mode only.
template <typename Real>
struct BatchNormState {
  std::vector<Real> running_mean;
  std::vector<Real> running_var;
  Real momentum = Real(0.1);

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, Real(0)), running_var(channels, Real(1)) {}
};

// Per-channel normalization over N (and H, W for rank-4 input). In train
// mode it mutates `state`; nothing else is written.
template <typename Real>
Tensor<Real> batch_norm(const Tensor<Real>& input, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, BatchNormState<Real>& state, Mode mode,
                        Real eps = Real(1e-5)) {
  if (input.rank() != 2 && input.rank() != 4) {
    throw ShapeError("batch_norm: input must be NxC or NxCxHxW, got " + shape_str(input.shape()));
  }
  const std::size_t n = input.extent(0), channels = input.extent(1);
  const std::size_t plane = input.rank() == 4 ? input.extent(2) * input.extent(3) : 1;
  if (gamma.numel() != channels || beta.numel() != channels ||
      state.running_mean.size() != channels || state.running_var.size() != channels) {
    throw ShapeError("batch_norm: parameters sized for " + std::to_string(gamma.numel()) +
                     " channels, input " + shape_str(input.shape()));
  }
  const std::size_t count = n * plane;
  const auto x = input.values();
  const auto g = gamma.values();
  const auto b = beta.values();

  std::vector<Real> mean(channels), inv_std(channels);
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < channels; ++c) {
      double sum = 0, sq = 0;
      for (std::size_t s = 0; s < n; ++s) sum += detail::plane_array(x.data() + (s * channels + c) * plane, plane).template cast<double>().sum();
      const double mu = sum / static_cast<double>(count);
      for (std::size_t s = 0; s < n; ++s) {
        sq += (detail::plane_array(x.data() + (s * channels + c) * plane, plane).template cast<double>() - mu).square().sum();
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<Real>(mu);
      inv_std[c] = static_cast<Real>(1.0 / std::sqrt(var + eps));
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      state.running_mean[c] =
          (Real(1) - state.momentum) * state.running_mean[c] + state.momentum * mean[c];
      state.running_var[c] = (Real(1) - state.momentum) * state.running_var[c] +
                             state.momentum * static_cast<Real>(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = Real(1) / std::sqrt(state.running_var[c] + eps);
    }
  }

  std::vector<Real> xhat(input.numel()), out(input.numel());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (s * channels + c) * plane;
      const Real mu = mean[c], is = inv_std[c], gc = g[c], bc = b[c];
      const Real* xp = x.data() + base;
      Real* xh = xhat.data() + base;
      Real* o = out.data() + base;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (xp[i] - mu) * is;
        o[i] = gc * xh[i] + bc;
      }
    }
  }

  return make_result<Real>(
      input.shape(), std::move(out), {input, gamma, beta},
      [xhat = std::move(xhat), inv_std, n, channels, plane, count,
       train = mode == Mode::train](TensorNode<Real>& self) {
        auto& x_node = *self.parents[0];
        auto& g_node = *self.parents[1];
        auto& b_node = *self.parents[2];
        const Real* dy = self.grad.data();
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_dy = 0, sum_dy_xhat = 0;
          for (std::size_t s = 0; s < n; ++s) {
            const std::size_t base = (s * channels + c) * plane;
            const auto d = detail::plane_array(dy + base, plane);
            sum_dy += d.template cast<double>().sum();
            sum_dy_xhat += (d * detail::plane_array(xhat.data() + base, plane)).template cast<double>().sum();
          }
          if (g_node.requires_grad) g_node.grad_buffer()[c] += static_cast<Real>(sum_dy_xhat);
          if (b_node.requires_grad) b_node.grad_buffer()[c] += static_cast<Real>(sum_dy);
          if (!x_node.requires_grad) continue;
          Real* dx = x_node.grad_buffer().data();
          const Real scale = g_node.value[c] * inv_std[c];
          const Real m = static_cast<Real>(count);
          const Real k = scale / m, mean_dy = static_cast<Real>(sum_dy), mean_dxh = static_cast<Real>(sum_dy_xhat);
          for (std::size_t s = 0; s < n; ++s) {
            const std::size_t base = (s * channels + c) * plane;
            const Real* d = dy + base;
            const Real* xh = xhat.data() + base;
            Real* o = dx + base;
            if (train) {
              for (std::size_t i = 0; i < plane; ++i) o[i] += k * (m * d[i] - mean_dy - xh[i] * mean_dxh);
            } else {
              for (std::size_t i = 0; i < plane; ++i) o[i] += scale * d[i];
            }
          }
        }
      });
}

// Elementwise max(x, slope*x) for slope in [0, 1]; slope 0 is ReLU.
template <typename Real>
Tensor<Real> leaky_relu(const Tensor<Real>& input, Real slope) {
  const auto x = input.values();
  std::vector<Real> out(x.size());
  const Real* xs = x.data();
  Real* ys = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) ys[i] = std::max(xs[i], Real(0)) + slope * std::min(xs[i], Real(0));
  return make_result<Real>(input.shape(), std::move(out), {input},
                           [slope](TensorNode<Real>& self) {
                             auto& p = *self.parents[0];
                             auto& dx = p.grad_buffer();
                             const Real* v = p.value.data();
                             const Real* g = self.grad.data();
                             Real* d = dx.data();
                             for (std::size_t i = 0; i < dx.size(); ++i) {
                               const Real m = static_cast<Real>(v[i] > 0);
                               d[i] += g[i] * (m + slope * (Real(1) - m));
                             }
                           });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& input) {
  return leaky_relu(input, Real(0));
}

template <typename Real>
Tensor<Real> max_pool2d(const Tensor<Real>& input, std::size_t kernel, std::size_t stride,
                        std::size_t pad = 0) {
  detail::require_rank(input, 4, "max_pool2d", "input");
  if (kernel == 0 || stride == 0) throw ConfigError("max_pool2d: kernel and stride must be positive");
  const std::size_t n = input.extent(0), c = input.extent(1), h = input.extent(2),
                    w = input.extent(3);
  const std::size_t oh = detail::conv_out_extent(h, kernel, stride, pad, "max_pool2d");
  const std::size_t ow = detail::conv_out_extent(w, kernel, stride, pad, "max_pool2d");
  const auto x = input.values();
  std::vector<Real> out(n * c * oh * ow);
  std::vector<std::int64_t> argmax(out.size(), -1);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t in_base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Real best = -std::numeric_limits<Real>::infinity();
        std::int64_t where = -1;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            const std::size_t idx = in_base + static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
            if (where < 0 || x[idx] > best) {
              best = x[idx];
              where = static_cast<std::int64_t>(idx);
            }
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = where < 0 ? Real(0) : best;
        argmax[o] = where;
      }
    }
  }
  return make_result<Real>({n, c, oh, ow}, std::move(out), {input},
                           [argmax = std::move(argmax)](TensorNode<Real>& self) {
                             auto& dx = self.parents[0]->grad_buffer();
                             for (std::size_t o = 0; o < argmax.size(); ++o) {
                               if (argmax[o] >= 0) dx[static_cast<std::size_t>(argmax[o])] += self.grad[o];
                             }
                           });
}

// NxCxHxW -> NxC mean over the spatial plane.
template <typename Real>
Tensor<Real> global_avg_pool(const Tensor<Real>& input) {
  detail::require_rank(input, 4, "global_avg_pool", "input");
  const std::size_t n = input.extent(0), c = input.extent(1);
  const std::size_t plane = input.extent(2) * input.extent(3);
  const auto x = input.values();
  std::vector<Real> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    Real sum = 0;
    for (std::size_t k = 0; k < plane; ++k) sum += x[i * plane + k];
    out[i] = sum / static_cast<Real>(plane);
  }
  return make_result<Real>({n, c}, std::move(out), {input}, [plane](TensorNode<Real>& self) {
    auto& dx = self.parents[0]->grad_buffer();
    const Real inv = Real(1) / static_cast<Real>(plane);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      for (std::size_t k = 0; k < plane; ++k) dx[i * plane + k] += self.grad[i] * inv;
    }
  });
}

// x (NxD) * weight (DxK) + bias (K).
template <typename Real>
Tensor<Real> dense(const Tensor<Real>& input, const Tensor<Real>& weight, const Tensor<Real>& bias) {
  using namespace detail;
  require_rank(input, 2, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  const std::size_t n = input.extent(0), d = input.extent(1), k = weight.extent(1);
  if (weight.extent(0) != d || bias.numel() != k) {
    throw ShapeError("dense: input " + shape_str(input.shape()) + ", weight " +
                     shape_str(weight.shape()) + ", bias " + shape_str(bias.shape()) +
                     " do not chain");
  }
  std::vector<Real> out(n * k);
  MapMat<Real> y(out.data(), n, k);
  y.noalias() = ConstMapMat<Real>(input.values().data(), n, d) *
                ConstMapMat<Real>(weight.values().data(), d, k);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] += bias.values()[j];
  }
  return make_result<Real>({n, k}, std::move(out), {input, weight, bias},
                           [n, d, k](TensorNode<Real>& self) {
                             auto& x = *self.parents[0];
                             auto& w = *self.parents[1];
                             auto& b = *self.parents[2];
                             ConstMapMat<Real> dy(self.grad.data(), n, k);
                             if (x.requires_grad) {
                               MapMat<Real>(x.grad_buffer().data(), n, d).noalias() +=
                                   dy * ConstMapMat<Real>(w.value.data(), d, k).transpose();
                             }
                             if (w.requires_grad) {
                               MapMat<Real>(w.grad_buffer().data(), d, k).noalias() +=
                                   ConstMapMat<Real>(x.value.data(), n, d).transpose() * dy;
                             }
                             if (b.requires_grad) {
                               auto& db = b.grad_buffer();
                               for (std::size_t r = 0; r < n; ++r) {
                                 for (std::size_t j = 0; j < k; ++j) db[j] += self.grad[r * k + j];
                               }
                             }
                           });
}

// Mean over the batch of -log softmax(logits)[label].
template <typename Real>
Tensor<Real> softmax_cross_entropy(const Tensor<Real>& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  }
  const auto z = logits.values();
  std::vector<Real> probs(n * k);
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw DataError(DataError::Kind::invalid, "softmax_cross_entropy: label " +
                                                    std::to_string(labels[r]) + " outside [0, " +
                                                    std::to_string(k) + ")");
    }
    const Real* row = z.data() + r * k;
    const Real mx = *std::max_element(row, row + k);
    double sum = 0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = static_cast<Real>(std::exp(static_cast<double>(row[j]) - lse));
    }
    total += lse - static_cast<double>(row[labels[r]]);
  }
  std::vector<int> targets(labels.begin(), labels.end());
  return make_result<Real>(
      {1}, {static_cast<Real>(total / static_cast<double>(n))}, {logits},
      [probs = std::move(probs), targets = std::move(targets), n, k](TensorNode<Real>& self) {
        auto& dz = self.parents[0]->grad_buffer();
        const Real up = self.grad[0] / static_cast<Real>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < k; ++j) {
            const Real onehot = static_cast<int>(j) == targets[r] ? Real(1) : Real(0);
            dz[r * k + j] += up * (probs[r * k + j] - onehot);
          }
        }
      });
}

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_result<Real>(a.shape(), std::move(out), {a, b}, [](TensorNode<Real>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& d = p->grad_buffer();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a.values()[i];
  return make_result<Real>(a.shape(), std::move(out), {a}, [factor](TensorNode<Real>& self) {
    auto& d = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * self.grad[i];
  });
}

// Scalar sum of squares.
template <typename Real>
Tensor<Real> sum_squares(const Tensor<Real>& a) {
  Real sum = 0;
  for (Real v : a.values()) sum += v * v;
  return make_result<Real>({1}, {sum}, {a}, [](TensorNode<Real>& self) {
    auto& p = *self.parents[0];
    auto& d = p.grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += Real(2) * p.value[i] * self.grad[0];
  });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<Real> out(a.values().begin(), a.values().end());
  return make_result<Real>(std::move(shape), std::move(out), {a}, [](TensorNode<Real>& self) {
    auto& d = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
  });
}

// mean(weights * |a - b|). The subgradient of |.| at 0 is taken as 0.
// weights are constants: no gradient flows into them.
template <typename Real>
Tensor<Real> weighted_abs_mean(std::span<const Real> weights, const Tensor<Real>& a,
                               const Tensor<Real>& b) {
  if (a.shape() != b.shape() || weights.size() != a.numel()) {
    throw ShapeError("weighted_abs_mean: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()) + " with " + std::to_string(weights.size()) +
                     " weights");
  }
  const std::size_t count = a.numel();
  double total = 0;
  std::vector<Real> coeff(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Real diff = a.values()[i] - b.values()[i];
    total += static_cast<double>(weights[i]) * std::abs(static_cast<double>(diff));
    const Real sign = diff > 0 ? Real(1) : (diff < 0 ? Real(-1) : Real(0));
    coeff[i] = weights[i] * sign / static_cast<Real>(count);
  }
  return make_result<Real>({1}, {static_cast<Real>(total / static_cast<double>(count))}, {a, b},
                           [coeff = std::move(coeff)](TensorNode<Real>& self) {
                             const Real up = self.grad[0];
                             auto& pa = *self.parents[0];
                             auto& pb = *self.parents[1];
                             if (pa.requires_grad) {
                               auto& d = pa.grad_buffer();
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += up * coeff[i];
                             }
                             if (pb.requires_grad) {
                               auto& d = pb.grad_buffer();
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] -= up * coeff[i];
                             }
                           });
}

}  // namespace kpn
