#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "wavemsnet/tensor.hpp"

// Plain nested-loop references, written straight from the definitions.
namespace oracle {

using wavemsnet::Tensor;

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride, std::size_t left,
                 std::size_t right) {
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2), O = w.dim(0), K = w.dim(2);
  const std::size_t out = (L + left + right - K) / stride + 1;
  Tensor<T> y({B, O, out});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t t = 0; t < out; ++t) {
        T acc = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t k = 0; k < K; ++k) {
            const long pos = long(t * stride + k) - long(left);
            if (pos >= 0 && pos < long(L)) acc += x.at({n, c, std::size_t(pos)}) * w.at({o, c, k});
          }
        y.at({n, o, t}) = acc + b[o];
      }
  return y;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t sh, std::size_t sw,
                 std::size_t ph, std::size_t pw) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const std::size_t oh = (H + 2 * ph - KH) / sh + 1, ow = (W + 2 * pw - KW) / sw + 1;
  Tensor<T> y({B, O, oh, ow});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          T acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < KH; ++a)
              for (std::size_t d = 0; d < KW; ++d) {
                const long r = long(i * sh + a) - long(ph), q = long(j * sw + d) - long(pw);
                if (r >= 0 && r < long(H) && q >= 0 && q < long(W)) {
                  acc += x.at({n, c, std::size_t(r), std::size_t(q)}) * w.at({o, c, a, d});
                }
              }
          y.at({n, o, i, j}) = acc + b[o];
        }
  return y;
}

/// Max over disjoint windows of the last axis.
template <typename T>
Tensor<T> maxpool1d(const Tensor<T>& x, std::size_t size) {
  wavemsnet::Shape s = x.shape();
  const std::size_t L = s.back(), out = L / size, rows = x.size() / L;
  s.back() = out;
  Tensor<T> y(s);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t t = 0; t < out; ++t) {
      T m = x[r * L + t * size];
      for (std::size_t k = 1; k < size; ++k) m = std::max(m, x[r * L + t * size + k]);
      y[r * out + t] = m;
    }
  return y;
}

/// Max over disjoint (a, b) windows of the last two axes.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t a, std::size_t b) {
  wavemsnet::Shape s = x.shape();
  const std::size_t H = s[s.size() - 2], W = s.back(), oh = H / a, ow = W / b, planes = x.size() / (H * W);
  s[s.size() - 2] = oh;
  s.back() = ow;
  Tensor<T> y(s);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        T m = x[p * H * W + i * a * W + j * b];
        for (std::size_t u = 0; u < a; ++u)
          for (std::size_t v = 0; v < b; ++v) m = std::max(m, x[p * H * W + (i * a + u) * W + j * b + v]);
        y[p * oh * ow + i * ow + j] = m;
      }
  return y;
}

/// |X[k]| of a direct DFT, k = 0..n/2.
inline std::vector<double> dft_magnitude(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<double> out(n / 2 + 1);
  for (std::size_t k = 0; k <= n / 2; ++k) {
    double re = 0, im = 0;
    for (std::size_t t = 0; t < n; ++t) {
      const double ph = -2.0 * std::numbers::pi * double(k) * double(t) / double(n);
      re += x[t] * std::cos(ph);
      im += x[t] * std::sin(ph);
    }
    out[k] = std::hypot(re, im);
  }
  return out;
}

}  // namespace oracle
