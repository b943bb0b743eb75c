#pragma once

// Raw forward/backward kernels on dense NCHW tensors. No autodiff here; the
// tape in autodiff.hpp wires these together.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "odenet/parallel.hpp"
#include "odenet/tensor.hpp"

namespace odenet::kernels {

namespace detail {

template <typename T>
using Vec [[gnu::vector_size(64)]] = T;

template <typename T>
inline Vec<T> load(const T* p) {
  Vec<T> v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

template <typename T, typename V>
inline void store(T* p, const V& v) {
  std::memcpy(p, &v, sizeof(v));
}

/// Rows [m0, m0+R) of C = A*B.
template <std::size_t R, typename T>
void gemm_row_panel(std::size_t K, std::size_t N, const T* a, const T* B, T* C) {
  using V = Vec<T>;
  constexpr std::size_t kLanes = sizeof(V) / sizeof(T);
  std::size_t n0 = 0;
  for (; n0 + 2 * kLanes <= N; n0 += 2 * kLanes) {
    V c[R][2] = {};
    for (std::size_t k = 0; k < K; ++k) {
      const V b0 = load<T>(B + k * N + n0);
      const V b1 = load<T>(B + k * N + n0 + kLanes);
      for (std::size_t r = 0; r < R; ++r) {
        const T w = a[r * K + k];
        c[r][0] += w * b0;
        c[r][1] += w * b1;
      }
    }
    for (std::size_t r = 0; r < R; ++r) {
      store(C + r * N + n0, c[r][0]);
      store(C + r * N + n0 + kLanes, c[r][1]);
    }
  }
  for (; n0 + kLanes <= N; n0 += kLanes) {
    V c[R] = {};
    for (std::size_t k = 0; k < K; ++k) {
      const V b0 = load<T>(B + k * N + n0);
      for (std::size_t r = 0; r < R; ++r) c[r] += a[r * K + k] * b0;
    }
    for (std::size_t r = 0; r < R; ++r) store(C + r * N + n0, c[r]);
  }
  for (; n0 < N; ++n0)
    for (std::size_t r = 0; r < R; ++r) {
      T acc = 0;
      for (std::size_t k = 0; k < K; ++k) acc += a[r * K + k] * B[k * N + n0];
      C[r * N + n0] = acc;
    }
}

}  // namespace detail

/// C[M,N] = A[M,K] * B[K,N], all row-major. Every output element is summed
/// in increasing k starting from zero, one product at a time, which makes the
/// result bit-identical to a plain triple loop (compile without FP contraction).
template <typename T>
void gemm_ordered(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
  std::size_t m = 0;
  for (; m + 6 <= M; m += 6) detail::gemm_row_panel<6>(K, N, A + m * K, B, C + m * N);
  switch (M - m) {
    case 5: detail::gemm_row_panel<5>(K, N, A + m * K, B, C + m * N); break;
    case 4: detail::gemm_row_panel<4>(K, N, A + m * K, B, C + m * N); break;
    case 3: detail::gemm_row_panel<3>(K, N, A + m * K, B, C + m * N); break;
    case 2: detail::gemm_row_panel<2>(K, N, A + m * K, B, C + m * N); break;
    case 1: detail::gemm_row_panel<1>(K, N, A + m * K, B, C + m * N); break;
    default: break;
  }
}

struct ConvGeometry {
  std::size_t cin, h, w, cout, kh, kw, stride, pad, oh, ow;

  std::size_t k() const { return cin * kh * kw; }
  std::size_t p() const { return oh * ow; }
  bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ShapeError("conv2d expects input (N,C,H,W) and kernel (Cout,Cin,kh,kw), got input " +
                     x.str() + " and kernel " + w.str());
  if (x[1] != w[1])
    throw ShapeError("conv2d channel mismatch: input " + x.str() + " has Cin=" + std::to_string(x[1]) +
                     " but kernel " + w.str() + " expects Cin=" + std::to_string(w[1]));
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  if (x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3])
    throw ShapeError("conv2d kernel " + w.str() + " larger than padded input " + x.str());
  ConvGeometry g{x[1], x[2], x[3], w[0], w[2], w[3], stride, pad, 0, 0};
  g.oh = conv_out_extent(g.h, g.kh, stride, pad);
  g.ow = conv_out_extent(g.w, g.kw, stride, pad);
  return g;
}

namespace detail {

/// Output columns [lo, hi) of a kernel tap that read inside the image row.
inline void valid_columns(const ConvGeometry& g, std::size_t kx, std::size_t& lo, std::size_t& hi) {
  // ix = ox * stride + kx - pad must lie in [0, w)
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride);
  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
  std::ptrdiff_t l = off >= 0 ? 0 : (-off + s - 1) / s;
  std::ptrdiff_t h = (static_cast<std::ptrdiff_t>(g.w) - off + s - 1) / s;
  l = std::clamp<std::ptrdiff_t>(l, 0, static_cast<std::ptrdiff_t>(g.ow));
  h = std::clamp<std::ptrdiff_t>(h, l, static_cast<std::ptrdiff_t>(g.ow));
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(h);
}

/// Calls fn(out_row_ptr_offset, in_row_or_null, lo, hi) for each output row
/// of every (c, ky, kx) tap.
template <typename Fn>
void for_each_tap_row(const ConvGeometry& g, Fn&& fn) {
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        std::size_t lo, hi;
        valid_columns(g, kx, lo, hi);
        const std::size_t row = ((c * g.kh + ky) * g.kw + kx) * g.p();
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          const bool inside = iy >= 0 && iy < static_cast<std::ptrdiff_t>(g.h);
          // first input column read by output column 0 (may be negative)
          const std::ptrdiff_t ix0 = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(g.pad);
          fn(row + oy * g.ow, inside ? (c * g.h + static_cast<std::size_t>(iy)) * g.w : std::size_t(-1), ix0, lo,
             inside ? hi : lo);
        }
      }
}

}  // namespace detail

/// One image [Cin,H,W] -> column matrix [Cin*kh*kw, oh*ow]; padding reads as zero.
template <typename T>
void im2col(const ConvGeometry& g, const T* img, T* col) {
  detail::for_each_tap_row(g, [&](std::size_t out, std::size_t in, std::ptrdiff_t ix0, std::size_t lo, std::size_t hi) {
    T* dst = col + out;
    std::fill(dst, dst + lo, T(0));
    if (hi > lo) {
      const T* src = img + in;
      if (g.stride == 1) {
        std::copy_n(src + (static_cast<std::ptrdiff_t>(lo) + ix0), hi - lo, dst + lo);
      } else {
        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[static_cast<std::ptrdiff_t>(ox * g.stride) + ix0];
      }
    }
    std::fill(dst + hi, dst + g.ow, T(0));
  });
}

/// Scatter-add of a column matrix back onto one image.
template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, T* img) {
  detail::for_each_tap_row(g, [&](std::size_t out, std::size_t in, std::ptrdiff_t ix0, std::size_t lo, std::size_t hi) {
    if (hi <= lo) return;
    const T* srcrow = col + out;
    T* dst = img + in;
    if (g.stride == 1) {
      T* d = dst + (static_cast<std::ptrdiff_t>(lo) + ix0);
      for (std::size_t ox = lo; ox < hi; ++ox) d[ox - lo] += srcrow[ox];
    } else {
      for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<std::ptrdiff_t>(ox * g.stride) + ix0] += srcrow[ox];
    }
  });
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry<T>(x.shape(), w.shape(), stride, pad);
  const std::size_t N = x.dim(0);
  Tensor<T> y(Shape{N, g.cout, g.oh, g.ow});
  parallel_for(N, [&](std::size_t n) {
    const T* img = x.data() + n * g.cin * g.h * g.w;
    T* out = y.data() + n * g.cout * g.p();
    if (g.is_pointwise()) {
      gemm_ordered(g.cout, g.k(), g.p(), w.data(), img, out);
      return;
    }
    std::vector<T> col(g.k() * g.p());
    im2col(g, img, col.data());
    gemm_ordered(g.cout, g.k(), g.p(), w.data(), col.data(), out);
  });
  return y;
}

/// Gradients of conv2d. Either output pointer may be null to skip that term.
/// The kernel gradient is reduced over images in index order.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, std::size_t stride,
                     std::size_t pad, Tensor<T>* dx, Tensor<T>* dw) {
  const ConvGeometry g = conv_geometry<T>(x.shape(), w.shape(), stride, pad);
  const std::size_t N = x.dim(0);
  const std::size_t K = g.k(), P = g.p();

  std::vector<T> wt;
  if (dx) {
    wt.resize(K * g.cout);
    for (std::size_t co = 0; co < g.cout; ++co)
      for (std::size_t k = 0; k < K; ++k) wt[k * g.cout + co] = w[co * K + k];
  }
  std::vector<T> dw_per_image;
  if (dw) dw_per_image.assign(N * g.cout * K, T(0));

  parallel_for(N, [&](std::size_t n) {
    const T* img = x.data() + n * g.cin * g.h * g.w;
    const T* g_out = dy.data() + n * g.cout * P;
    if (dw) {
      // dW^T[k, co] = sum_p col[k, p] * dY^T[p, co]
      std::vector<T> gyt(P * g.cout), dwt(K * g.cout);
      for (std::size_t co = 0; co < g.cout; ++co)
        for (std::size_t p = 0; p < P; ++p) gyt[p * g.cout + co] = g_out[co * P + p];
      if (g.is_pointwise()) {
        gemm_ordered(K, P, g.cout, img, gyt.data(), dwt.data());
      } else {
        std::vector<T> col(K * P);
        im2col(g, img, col.data());
        gemm_ordered(K, P, g.cout, col.data(), gyt.data(), dwt.data());
      }
      T* part = dw_per_image.data() + n * g.cout * K;
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t co = 0; co < g.cout; ++co) part[co * K + k] = dwt[k * g.cout + co];
    }
    if (dx) {
      T* g_in = dx->data() + n * g.cin * g.h * g.w;
      if (g.is_pointwise()) {
        std::vector<T> tmp(K * P);
        gemm_ordered(K, g.cout, P, wt.data(), g_out, tmp.data());
        for (std::size_t i = 0; i < K * P; ++i) g_in[i] += tmp[i];
      } else {
        std::vector<T> col(K * P);
        gemm_ordered(K, g.cout, P, wt.data(), g_out, col.data());
        col2im_add(g, col.data(), g_in);
      }
    }
  });
  if (dw) {
    for (std::size_t n = 0; n < N; ++n) {
      const T* part = dw_per_image.data() + n * g.cout * K;
      for (std::size_t i = 0; i < g.cout * K; ++i) (*dw)[i] += part[i];
    }
  }
}

enum class Mode { train, eval };

struct BatchNormConfig {
  double epsilon = 1e-5;
  /// Weight kept on the old running statistic in the moving average.
  double momentum = 0.9;
};

/// Per-channel statistics captured by a train-mode forward pass.
template <typename T>
struct BatchNormSaved {
  std::vector<T> mean;
  std::vector<T> inv_std;
};

template <typename T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                            Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode,
                            const BatchNormConfig& cfg, BatchNormSaved<T>& saved) {
  if (x.rank() != 4 && x.rank() != 2)
    throw ShapeError("batchnorm expects (N,C,H,W) or (N,C), got " + x.shape().str());
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t S = x.size() / (N * C);
  for (const Tensor<T>* p : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean), static_cast<const Tensor<T>*>(&running_var)})
    if (p->size() != C)
      throw ShapeError("batchnorm parameter of shape " + p->shape().str() + " does not match " +
                       std::to_string(C) + " channels of input " + x.shape().str());
  const std::size_t M = N * S;
  const T eps = static_cast<T>(cfg.epsilon);
  saved.mean.assign(C, T(0));
  saved.inv_std.assign(C, T(0));
  if (mode == Mode::train) {
    if (M < 2)
      throw std::invalid_argument("batchnorm in train mode needs at least 2 values per channel, got " +
                                  std::to_string(M) + " for input " + x.shape().str());
    const T mom = static_cast<T>(cfg.momentum);
    for (std::size_t c = 0; c < C; ++c) {
      T sum = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) sum += p[i];
      }
      const T mean = sum / static_cast<T>(M);
      T sq = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = x.data() + (n * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) sq += (p[i] - mean) * (p[i] - mean);
      }
      const T var = sq / static_cast<T>(M);
      saved.mean[c] = mean;
      saved.inv_std[c] = T(1) / std::sqrt(var + eps);
      running_mean[c] = mom * running_mean[c] + (T(1) - mom) * mean;
      running_var[c] = mom * running_var[c] + (T(1) - mom) * (sq / static_cast<T>(M - 1));
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      saved.mean[c] = running_mean[c];
      saved.inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x.data() + (n * C + c) * S;
      T* q = y.data() + (n * C + c) * S;
      const T m = saved.mean[c], s = saved.inv_std[c], gm = gamma[c], bt = beta[c];
      for (std::size_t i = 0; i < S; ++i) q[i] = (p[i] - m) * s * gm + bt;
    }
  return y;
}

template <typename T>
void batchnorm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& dy, Mode mode,
                        const BatchNormSaved<T>& saved, Tensor<T>* dx, Tensor<T>* dgamma,
                        Tensor<T>* dbeta) {
  const std::size_t N = x.dim(0), C = x.dim(1);
  const std::size_t S = x.size() / (N * C);
  const T M = static_cast<T>(N * S);
  for (std::size_t c = 0; c < C; ++c) {
    const T m = saved.mean[c], s = saved.inv_std[c];
    T sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * S;
      const T* g = dy.data() + (n * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        sum_dy += g[i];
        sum_dy_xhat += g[i] * (p[i] - m) * s;
      }
    }
    if (dgamma) (*dgamma)[c] += sum_dy_xhat;
    if (dbeta) (*dbeta)[c] += sum_dy;
    if (!dx) continue;
    const T scale = gamma[c] * s;
    for (std::size_t n = 0; n < N; ++n) {
      const T* p = x.data() + (n * C + c) * S;
      const T* g = dy.data() + (n * C + c) * S;
      T* q = dx->data() + (n * C + c) * S;
      if (mode == Mode::train) {
        for (std::size_t i = 0; i < S; ++i) {
          const T xhat = (p[i] - m) * s;
          q[i] += scale * (g[i] - sum_dy / M - xhat * sum_dy_xhat / M);
        }
      } else {
        for (std::size_t i = 0; i < S; ++i) q[i] += scale * g[i];
      }
    }
  }
}

/// Average-pool 2x2/stride 2, then zero-pad channels up to `out_channels`.
/// Parameter-free stand-in for a removed downsampling block.
template <typename T>
Tensor<T> pool_pad_forward(const Tensor<T>& x, std::size_t out_channels) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (out_channels < C) throw ShapeError("pool_pad cannot reduce channels of " + x.shape().str());
  const std::size_t OH = (H + 1) / 2, OW = (W + 1) / 2;
  Tensor<T> y(Shape{N, out_channels, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          T s = 0;
          std::size_t cnt = 0;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t iy = 2 * oy + dy, ix = 2 * ox + dx;
              if (iy < H && ix < W) {
                s += x.at(n, c, iy, ix);
                ++cnt;
              }
            }
          y.at(n, c, oy, ox) = s / static_cast<T>(cnt);
        }
  return y;
}

template <typename T>
void pool_pad_backward(const Tensor<T>& x, const Tensor<T>& dy, Tensor<T>& dx) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OH = dy.dim(2), OW = dy.dim(3);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          std::size_t cnt = 0;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b)
              if (2 * oy + a < H && 2 * ox + b < W) ++cnt;
          const T g = dy.at(n, c, oy, ox) / static_cast<T>(cnt);
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b)
              if (2 * oy + a < H && 2 * ox + b < W) dx.at(n, c, 2 * oy + a, 2 * ox + b) += g;
        }
}

}  // namespace odenet::kernels
