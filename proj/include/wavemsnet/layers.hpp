#pragma once

#include <cmath>
#include <cstring>
#include <random>
#include <string>
#include <vector>

#include "wavemsnet/ops.hpp"

namespace wavemsnet {

enum class Mode { train, eval };

struct Padding1d {
  std::size_t left = 0;
  std::size_t right = 0;
  bool operator==(const Padding1d&) const = default;
};

/// Padding that makes a strided convolution produce ceil(length / stride)
/// outputs. Odd totals put the extra sample on the right.
inline Padding1d same_padding(std::size_t length, std::size_t kernel, std::size_t stride) {
  const std::size_t out = (length + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > length ? needed - length : 0;
  return {total / 2, total - total / 2};
}

inline std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                                      std::size_t pad_total) {
  return (length + pad_total - kernel) / stride + 1;
}

namespace detail {

// col[(c*K + t), n] = x[c, n*stride + t - left], zero outside [0, length).
template <typename T>
void im2col_1d(const T* x, std::size_t channels, std::size_t length, std::size_t kernel,
               std::size_t stride, std::size_t left, std::size_t out_len, T* col) {
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = x + c * length;
    for (std::size_t t = 0; t < kernel; ++t) {
      T* row = col + (c * kernel + t) * out_len;
      // valid n: 0 <= n*stride + t - left < length
      const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(left);
      std::size_t first = 0;
      if (shift < 0) first = (static_cast<std::size_t>(-shift) + stride - 1) / stride;
      std::size_t last = 0;  // one past
      const std::ptrdiff_t limit = static_cast<std::ptrdiff_t>(length) - shift;  // n*stride < limit
      if (limit > 0) last = std::min(out_len, (static_cast<std::size_t>(limit) + stride - 1) / stride);
      if (first > last) first = last;
      std::fill(row, row + first, T(0));
      if (stride == 1) {
        if (last > first) {
          std::memcpy(row + first, src + (static_cast<std::ptrdiff_t>(first) + shift), (last - first) * sizeof(T));
        }
      } else {
        for (std::size_t n = first; n < last; ++n) row[n] = src[static_cast<std::ptrdiff_t>(n * stride) + shift];
      }
      std::fill(row + last, row + out_len, T(0));
    }
  }
}

template <typename T>
void col2im_1d(const T* col, std::size_t channels, std::size_t length, std::size_t kernel,
               std::size_t stride, std::size_t left, std::size_t out_len, T* x) {
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = x + c * length;
    for (std::size_t t = 0; t < kernel; ++t) {
      const T* row = col + (c * kernel + t) * out_len;
      for (std::size_t n = 0; n < out_len; ++n) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(n * stride + t) - static_cast<std::ptrdiff_t>(left);
        if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(length)) dst[pos] += row[n];
      }
    }
  }
}

struct Geometry2d {
  std::size_t channels, height, width, kh, kw, sh, sw, ph, pw, out_h, out_w;
};

template <typename T>
void im2col_2d(const T* x, const Geometry2d& g, T* col) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * g.sh + i) - static_cast<std::ptrdiff_t>(g.ph);
          T* out = row + oh * g.out_w;
          if (h < 0 || h >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* src = x + (c * g.height + static_cast<std::size_t>(h)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(ow * g.sw + j) - static_cast<std::ptrdiff_t>(g.pw);
            out[ow] = (w < 0 || w >= static_cast<std::ptrdiff_t>(g.width)) ? T(0) : src[w];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_2d(const T* col, const Geometry2d& g, T* x) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = col + ((c * g.kh + i) * g.kw + j) * plane;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(oh * g.sh + i) - static_cast<std::ptrdiff_t>(g.ph);
          if (h < 0 || h >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = x + (c * g.height + static_cast<std::size_t>(h)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(ow * g.sw + j) - static_cast<std::ptrdiff_t>(g.pw);
            if (w >= 0 && w < static_cast<std::ptrdiff_t>(g.width)) dst[w] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 1-D cross-correlation over the last axis of x[batch, in, length] with
/// weight[out, in, k]:
///   y[b,o,n] = sum_i sum_t x[b, i, n*stride + t - left] * w[o,i,t] + bias[o]
template <typename T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, Padding1d pad) {
  if (x.rank() != 3 || weight.rank() != 3 || bias.rank() != 1 || weight.dim(1) != x.dim(1) ||
      bias.dim(0) != weight.dim(0)) {
    throw Error(ErrorCode::shape_mismatch, "conv1d: input " + to_string(x.shape()) + ", weight " +
                                               to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  }
  if (stride == 0) throw Error(ErrorCode::invalid_argument, "conv1d: stride must be positive");
  const std::size_t batch = x.dim(0), in_ch = x.dim(1), length = x.dim(2);
  const std::size_t out_ch = weight.dim(0), kernel = weight.dim(2);
  if (length + pad.left + pad.right < kernel) {
    throw Error(ErrorCode::shape_mismatch, "conv1d: kernel " + std::to_string(kernel) +
                                               " longer than padded input " +
                                               std::to_string(length + pad.left + pad.right));
  }
  const std::size_t out_len = conv_output_length(length, kernel, stride, pad.left + pad.right);
  const std::size_t rows = in_ch * kernel;

  Tensor<T> y({batch, out_ch, out_len});
  AlignedVector<T> col(rows * out_len);
  ConstMatrixMap<T> w(weight.raw(), out_ch, rows);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::im2col_1d(x.raw() + b * in_ch * length, in_ch, length, kernel, stride, pad.left, out_len, col.data());
    MatrixMap<T> out(y.raw() + b * out_ch * out_len, out_ch, out_len);
    out.noalias() = w * ConstMatrixMap<T>(col.data(), rows, out_len);
    for (std::size_t o = 0; o < out_ch; ++o) out.row(o).array() += bias[o];
  }

  if (tape.wants({&x, &weight, &bias})) {
    tape.record({x, weight, bias}, y, [=]() {
      ConstMatrixMap<T> wm(weight.raw(), out_ch, rows);
      const T* gy = Tape<T>::pending(y).data();
      AlignedVector<T> scratch(rows * out_len);
      for (std::size_t b = 0; b < batch; ++b) {
        ConstMatrixMap<T> g(gy + b * out_ch * out_len, out_ch, out_len);
        if (weight.requires_grad()) {
          detail::im2col_1d(x.raw() + b * in_ch * length, in_ch, length, kernel, stride, pad.left, out_len,
                            scratch.data());
          MatrixMap<T>(Tape<T>::pending(weight).data(), out_ch, rows).noalias() +=
              g * ConstMatrixMap<T>(scratch.data(), rows, out_len).transpose();
        }
        if (bias.requires_grad()) {
          auto gb = Tape<T>::pending(bias);
          for (std::size_t o = 0; o < out_ch; ++o) gb[o] += g.row(o).sum();
        }
        if (x.requires_grad()) {
          MatrixMap<T>(scratch.data(), rows, out_len).noalias() = wm.transpose() * g;
          detail::col2im_1d(scratch.data(), in_ch, length, kernel, stride, pad.left, out_len,
                            Tape<T>::pending(x).data() + b * in_ch * length);
        }
      }
    });
  }
  return y;
}

struct Conv2dGeometry {
  std::size_t stride_h = 1, stride_w = 1, pad_h = 0, pad_w = 0;
};

/// 2-D analogue of conv1d on x[batch, in, H, W] with weight[out, in, kh, kw]
/// and symmetric padding.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Conv2dGeometry geo = {}) {
  if (x.rank() != 4 || weight.rank() != 4 || bias.rank() != 1 || weight.dim(1) != x.dim(1) ||
      bias.dim(0) != weight.dim(0)) {
    throw Error(ErrorCode::shape_mismatch, "conv2d: input " + to_string(x.shape()) + ", weight " +
                                               to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  }
  if (geo.stride_h == 0 || geo.stride_w == 0) {
    throw Error(ErrorCode::invalid_argument, "conv2d: stride must be positive");
  }
  detail::Geometry2d g{};
  g.channels = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.sh = geo.stride_h;
  g.sw = geo.stride_w;
  g.ph = geo.pad_h;
  g.pw = geo.pad_w;
  if (g.height + 2 * g.ph < g.kh || g.width + 2 * g.pw < g.kw) {
    throw Error(ErrorCode::shape_mismatch, "conv2d: kernel " + to_string(weight.shape()) +
                                               " larger than padded input " + to_string(x.shape()));
  }
  g.out_h = conv_output_length(g.height, g.kh, g.sh, 2 * g.ph);
  g.out_w = conv_output_length(g.width, g.kw, g.sw, 2 * g.pw);
  const std::size_t batch = x.dim(0), out_ch = weight.dim(0);
  const std::size_t rows = g.channels * g.kh * g.kw, plane = g.out_h * g.out_w;
  const std::size_t in_size = g.channels * g.height * g.width;

  Tensor<T> y({batch, out_ch, g.out_h, g.out_w});
  AlignedVector<T> col(rows * plane);
  ConstMatrixMap<T> w(weight.raw(), out_ch, rows);
  for (std::size_t b = 0; b < batch; ++b) {
    detail::im2col_2d(x.raw() + b * in_size, g, col.data());
    MatrixMap<T> out(y.raw() + b * out_ch * plane, out_ch, plane);
    out.noalias() = w * ConstMatrixMap<T>(col.data(), rows, plane);
    for (std::size_t o = 0; o < out_ch; ++o) out.row(o).array() += bias[o];
  }

  if (tape.wants({&x, &weight, &bias})) {
    tape.record({x, weight, bias}, y, [=]() {
      ConstMatrixMap<T> wm(weight.raw(), out_ch, rows);
      const T* gy = Tape<T>::pending(y).data();
      AlignedVector<T> scratch(rows * plane);
      for (std::size_t b = 0; b < batch; ++b) {
        ConstMatrixMap<T> gm(gy + b * out_ch * plane, out_ch, plane);
        if (weight.requires_grad()) {
          detail::im2col_2d(x.raw() + b * in_size, g, scratch.data());
          MatrixMap<T>(Tape<T>::pending(weight).data(), out_ch, rows).noalias() +=
              gm * ConstMatrixMap<T>(scratch.data(), rows, plane).transpose();
        }
        if (bias.requires_grad()) {
          auto gb = Tape<T>::pending(bias);
          for (std::size_t o = 0; o < out_ch; ++o) gb[o] += gm.row(o).sum();
        }
        if (x.requires_grad()) {
          MatrixMap<T>(scratch.data(), rows, plane).noalias() = wm.transpose() * gm;
          detail::col2im_2d(scratch.data(), g, Tape<T>::pending(x).data() + b * in_size);
        }
      }
    });
  }
  return y;
}

/// Non-overlapping max pooling over the trailing `sizes.size()` axes (1 or 2).
/// Trailing remainders that do not fill a window are dropped. Gradient goes to
/// the first maximal element of each window.
template <typename T>
Tensor<T> maxpool(Tape<T>& tape, const Tensor<T>& x, std::vector<std::size_t> sizes) {
  if (sizes.empty() || sizes.size() > 2 || sizes.size() > x.rank()) {
    throw Error(ErrorCode::invalid_argument, "maxpool: pools 1 or 2 trailing axes of " + to_string(x.shape()));
  }
  for (auto s : sizes) {
    if (s < 1) throw Error(ErrorCode::invalid_argument, "maxpool: window size must be >= 1");
  }
  const bool two_d = sizes.size() == 2;
  const std::size_t rank = x.rank();
  const std::size_t height = two_d ? x.dim(rank - 2) : 1;
  const std::size_t width = x.dim(rank - 1);
  const std::size_t ph = two_d ? sizes[0] : 1;
  const std::size_t pw = sizes.back();
  const std::size_t out_h = height / ph, out_w = width / pw;
  if (out_h == 0 || out_w == 0) {
    throw Error(ErrorCode::shape_mismatch, "maxpool: window larger than input " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  if (two_d) out_shape[rank - 2] = out_h;
  out_shape[rank - 1] = out_w;
  const std::size_t outer = x.size() / (height * width);

  Tensor<T> y(out_shape);
  std::vector<std::size_t> argmax(y.size());
  for (std::size_t o = 0; o < outer; ++o) {
    const T* plane = x.raw() + o * height * width;
    for (std::size_t i = 0; i < out_h; ++i) {
      for (std::size_t j = 0; j < out_w; ++j) {
        std::size_t best = (i * ph) * width + j * pw;
        for (std::size_t di = 0; di < ph; ++di) {
          const std::size_t base = (i * ph + di) * width + j * pw;
          for (std::size_t dj = 0; dj < pw; ++dj) {
            if (plane[base + dj] > plane[best]) best = base + dj;
          }
        }
        const std::size_t k = (o * out_h + i) * out_w + j;
        y[k] = plane[best];
        argmax[k] = o * height * width + best;
      }
    }
  }
  if (tape.wants({&x})) {
    tape.record({x}, y, [x, y, argmax = std::move(argmax)]() {
      auto g = Tape<T>::pending(y);
      auto gx = Tape<T>::pending(x);
      for (std::size_t k = 0; k < g.size(); ++k) gx[argmax[k]] += g[k];
    });
  }
  return y;
}

/// Per-channel batch normalization of x[batch, ch, ...].
///
/// Train mode normalizes by the biased batch statistics and folds them into
/// the running estimates as running = momentum * running + (1 - momentum) * batch.
/// Eval mode normalizes by the running estimates, which stay untouched.
template <typename T>
Tensor<T> batchnorm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, double eps = 1e-5,
                    double momentum = 0.9) {
  if (x.rank() < 2 || gamma.size() != x.dim(1) || beta.size() != x.dim(1) ||
      running_mean.size() != x.dim(1) || running_var.size() != x.dim(1)) {
    throw Error(ErrorCode::shape_mismatch, "batchnorm: input " + to_string(x.shape()) + " with " +
                                               std::to_string(gamma.size()) + " channels");
  }
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.size() / (batch * channels);
  const std::size_t count = batch * spatial;
  if (mode == Mode::train && count < 2) {
    throw Error(ErrorCode::invalid_argument,
                "batchnorm: train mode needs at least 2 values per channel, input " + to_string(x.shape()));
  }

  Tensor<T> y(x.shape());
  auto xhat = std::make_shared<AlignedVector<T>>(x.size());
  std::vector<T> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double acc = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.raw() + (b * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) acc += p[s];
      }
      mean = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.raw() + (b * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) {
          const double d = p[s] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      running_mean[c] = static_cast<T>(momentum * running_mean[c] + (1.0 - momentum) * mean);
      running_var[c] = static_cast<T>(momentum * running_var[c] + (1.0 - momentum) * var);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const T m = static_cast<T>(mean);
    const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
    inv_std[c] = is;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t off = (b * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        const T h = (x[off + s] - m) * is;
        (*xhat)[off + s] = h;
        y[off + s] = gamma[c] * h + beta[c];
      }
    }
  }

  if (tape.wants({&x, &gamma, &beta})) {
    tape.record({x, gamma, beta}, y, [=]() {
      auto g = Tape<T>::pending(y);
      for (std::size_t c = 0; c < channels; ++c) {
        T sum_g = T(0), sum_gh = T(0);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t off = (b * channels + c) * spatial;
          for (std::size_t s = 0; s < spatial; ++s) {
            sum_g += g[off + s];
            sum_gh += g[off + s] * (*xhat)[off + s];
          }
        }
        if (gamma.requires_grad()) Tape<T>::pending(gamma)[c] += sum_gh;
        if (beta.requires_grad()) Tape<T>::pending(beta)[c] += sum_g;
        if (!x.requires_grad()) continue;
        auto gx = Tape<T>::pending(x);
        const T scale_c = gamma[c] * inv_std[c];
        if (mode == Mode::train) {
          const T n = static_cast<T>(count);
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * channels + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              gx[off + s] += scale_c / n * (n * g[off + s] - sum_g - (*xhat)[off + s] * sum_gh);
            }
          }
        } else {
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * channels + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) gx[off + s] += scale_c * g[off + s];
          }
        }
      }
    });
  }
  return y;
}

/// Inverted dropout: survivors are scaled by 1 / (1 - rate) so eval mode is
/// the identity.
template <typename T, typename Rng>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw Error(ErrorCode::invalid_argument, "dropout: rate " + std::to_string(rate) + " not in [0, 1)");
  }
  if (mode == Mode::eval || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T scale_kept = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = keep(rng) ? scale_kept : T(0);
    y[i] = x[i] * mask[i];
  }
  if (tape.wants({&x})) {
    tape.record({x}, y, [x, y, mask = std::move(mask)]() {
      auto g = Tape<T>::pending(y);
      auto gx = Tape<T>::pending(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return y;
}

/// y = x * weight^T + bias for x[batch, in], weight[out, in].
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1) || bias.size() != weight.dim(0)) {
    throw Error(ErrorCode::shape_mismatch, "linear: input " + to_string(x.shape()) + ", weight " +
                                               to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  }
  const std::size_t batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  Tensor<T> y({batch, out});
  MatrixMap<T> ym(y.raw(), batch, out);
  ym.noalias() = ConstMatrixMap<T>(x.raw(), batch, in) * ConstMatrixMap<T>(weight.raw(), out, in).transpose();
  for (std::size_t r = 0; r < batch; ++r) {
    for (std::size_t o = 0; o < out; ++o) ym(r, o) += bias[o];
  }
  if (tape.wants({&x, &weight, &bias})) {
    tape.record({x, weight, bias}, y, [=]() {
      ConstMatrixMap<T> g(Tape<T>::pending(y).data(), batch, out);
      if (weight.requires_grad()) {
        MatrixMap<T>(Tape<T>::pending(weight).data(), out, in).noalias() +=
            g.transpose() * ConstMatrixMap<T>(x.raw(), batch, in);
      }
      if (bias.requires_grad()) {
        auto gb = Tape<T>::pending(bias);
        for (std::size_t o = 0; o < out; ++o) gb[o] += g.col(o).sum();
      }
      if (x.requires_grad()) {
        MatrixMap<T>(Tape<T>::pending(x).data(), batch, in).noalias() +=
            g * ConstMatrixMap<T>(weight.raw(), out, in);
      }
    });
  }
  return y;
}

/// Concatenates x_k[batch, c_k, ...] along axis 1 in list order.
template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw Error(ErrorCode::invalid_argument, "concat: no inputs");
  const Shape& first = parts.front().shape();
  if (first.size() < 2) throw Error(ErrorCode::shape_mismatch, "concat: rank < 2 input " + to_string(first));
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    const bool ok = s.size() == first.size() && s[0] == first[0] &&
                    std::equal(s.begin() + 2, s.end(), first.begin() + 2);
    if (!ok) {
      throw Error(ErrorCode::shape_mismatch, "concat: " + to_string(s) + " incompatible with " + to_string(first));
    }
    channels += s[1];
  }
  if (parts.size() == 1) return parts.front();
  const std::size_t batch = first[0];
  const std::size_t inner = shape_size(first) / (first[0] * first[1]);
  Shape out_shape = first;
  out_shape[1] = channels;
  Tensor<T> y(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(1) * inner;
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(p.raw() + b * block, block, y.raw() + (b * channels + offset) * inner);
    }
    offset += p.dim(1);
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape.recording() && any) {
    tape.record(parts, y, [parts, y, offsets, batch, channels, inner]() {
      auto g = Tape<T>::pending(y);
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (!parts[k].requires_grad()) continue;
        auto gp = Tape<T>::pending(parts[k]);
        const std::size_t block = parts[k].dim(1) * inner;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* src = g.data() + (b * channels + offsets[k]) * inner;
          T* dst = gp.data() + b * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

}  // namespace wavemsnet
