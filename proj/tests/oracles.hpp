#pragma once

// Independent reference computations used by the tests. Written without the
// library kernels: plain loops, long double where precision matters.

#include <cmath>
#include <cstddef>
#include <vector>

#include "odenet/tensor.hpp"

namespace oracle {

/// Direct nested-loop convolution. Taps are summed per output element in
/// (input channel, kernel row, kernel column) order starting from zero.
template <typename T>
odenet::Tensor<T> direct_conv2d(const odenet::Tensor<T>& x, const odenet::Tensor<T>& w, std::size_t stride,
                                std::size_t pad) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  odenet::Tensor<T> y(odenet::Shape{N, Co, OH, OW});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          T acc = 0;
          for (std::size_t ci = 0; ci < Ci; ++ci)
            for (std::size_t ky = 0; ky < KH; ++ky)
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += w.at(co, ci, ky, kx) * x.at(n, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
          y.at(n, co, oy, ox) = acc;
        }
  return y;
}

/// Batch normalization of a list of scalars with biased batch variance.
inline std::vector<long double> batchnorm_scalars(const std::vector<long double>& x, long double gamma,
                                                  long double beta, long double eps) {
  long double mean = 0, var = 0;
  for (auto v : x) mean += v;
  mean /= x.size();
  for (auto v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  std::vector<long double> y;
  for (auto v : x) y.push_back(gamma * (v - mean) / std::sqrt(var + eps) + beta);
  return y;
}

/// ln(1 + e^{-2}): two-class cross-entropy of logits (1, -1) with label 0.
inline long double two_class_ce() { return std::log1p(std::exp(-2.0L)); }

/// Momentum SGD on a scalar with a fixed gradient.
inline std::vector<long double> sgd_recurrence(long double w, long double g, long double lr, long double mu,
                                               long double wd, int steps) {
  long double v = 0;
  std::vector<long double> out;
  for (int i = 0; i < steps; ++i) {
    v = mu * v + g + wd * w;
    w -= lr * v;
    out.push_back(w);
  }
  return out;
}

/// 1 - (2^{k+1} - 1) / (2^k (k + 1)) evaluated in long double.
inline long double time_saved(int k) {
  const long double p = std::ldexp(1.0L, k);
  return 1.0L - (2 * p - 1) / (p * (k + 1));
}

}  // namespace oracle
