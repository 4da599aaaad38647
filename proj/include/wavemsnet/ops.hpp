#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "wavemsnet/tensor.hpp"

namespace wavemsnet {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw Error(ErrorCode::shape_mismatch,
                std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) + " differ");
  }
}

template <typename T, typename Fn>
Tensor<T> map_values(const Tensor<T>& x, Fn fn) {
  Tensor<T> y(x.shape());
  auto in = x.data();
  auto out = y.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fn(in[i]);
  return y;
}

}  // namespace detail

enum class Elementwise { add, mul, relu, scale, log, exp };

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, y, [a, b, y]() mutable {
      auto g = Tape<T>::pending(y);
      for (const Tensor<T>* in : {&a, &b}) {
        if (!in->requires_grad()) continue;
        auto gi = Tape<T>::pending(*in);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, T b) {
  Tensor<T> y = detail::map_values(a, [b](T v) { return v + b; });
  if (tape.wants({&a})) {
    tape.record({a}, y, [a, y]() mutable {
      auto g = Tape<T>::pending(y);
      auto ga = Tape<T>::pending(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, y, [a, b, y]() mutable {
      auto g = Tape<T>::pending(y);
      if (a.requires_grad()) {
        auto ga = Tape<T>::pending(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = Tape<T>::pending(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  Tensor<T> y = detail::map_values(a, [factor](T v) { return v * factor; });
  if (tape.wants({&a})) {
    tape.record({a}, y, [a, y, factor]() mutable {
      auto g = Tape<T>::pending(y);
      auto ga = Tape<T>::pending(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, T factor) {
  return scale(tape, a, factor);
}

/// max(x, 0); the subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> y = detail::map_values(x, [](T v) { return v > T(0) ? v : T(0); });
  if (tape.wants({&x})) {
    tape.record({x}, y, [x, y]() mutable {
      auto g = Tape<T>::pending(y);
      auto gx = Tape<T>::pending(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > T(0)) gx[i] += g[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> log(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> y = detail::map_values(x, [](T v) { return std::log(v); });
  if (tape.wants({&x})) {
    tape.record({x}, y, [x, y]() mutable {
      auto g = Tape<T>::pending(y);
      auto gx = Tape<T>::pending(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / x[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> exp(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> y = detail::map_values(x, [](T v) { return std::exp(v); });
  if (tape.wants({&x})) {
    tape.record({x}, y, [x, y]() mutable {
      auto g = Tape<T>::pending(y);
      auto gx = Tape<T>::pending(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
    });
  }
  return y;
}

/// Dispatch form. Unary kinds ignore `b`; scale reads its factor from b[0].
template <typename T>
Tensor<T> elementwise(Tape<T>& tape, Elementwise kind, const Tensor<T>& a, const Tensor<T>& b) {
  switch (kind) {
    case Elementwise::add: return add(tape, a, b);
    case Elementwise::mul: return mul(tape, a, b);
    case Elementwise::relu: return relu(tape, a);
    case Elementwise::scale: return scale(tape, a, b.item());
    case Elementwise::log: return log(tape, a);
    case Elementwise::exp: return exp(tape, a);
  }
  throw Error(ErrorCode::invalid_argument, "unknown elementwise kind");
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  Tensor<T> y = Tensor<T>::scalar(total);
  if (tape.wants({&x})) {
    tape.record({x}, y, [x, y]() mutable {
      const T g = Tape<T>::pending(y)[0];
      auto gx = Tape<T>::pending(x);
      for (auto& v : gx) v += g;
    });
  }
  return y;
}

/// Same data, new shape. The element count must match.
template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw Error(ErrorCode::shape_mismatch,
                "reshape " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor<T> y(std::move(shape), x.data());
  if (tape.wants({&x})) {
    tape.record({x}, y, [x, y]() mutable {
      auto g = Tape<T>::pending(y);
      auto gx = Tape<T>::pending(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw Error(ErrorCode::shape_mismatch,
                "matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> y({m, n});
  MatrixMap<T>(y.raw(), m, n).noalias() = ConstMatrixMap<T>(a.raw(), m, k) * ConstMatrixMap<T>(b.raw(), k, n);
  if (tape.wants({&a, &b})) {
    tape.record({a, b}, y, [a, b, y, m, k, n]() mutable {
      ConstMatrixMap<T> g(Tape<T>::pending(y).data(), m, n);
      if (a.requires_grad()) {
        MatrixMap<T>(Tape<T>::pending(a).data(), m, k).noalias() += g * ConstMatrixMap<T>(b.raw(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MatrixMap<T>(Tape<T>::pending(b).data(), k, n).noalias() += ConstMatrixMap<T>(a.raw(), m, k).transpose() * g;
      }
    });
  }
  return y;
}

template <typename T>
struct CrossEntropyResult {
  Tensor<T> loss;   // scalar, differentiable w.r.t. the logits
  Tensor<T> probs;  // [batch, classes], detached
};

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                                            std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw Error(ErrorCode::shape_mismatch, "softmax_cross_entropy: logits " + to_string(logits.shape()) +
                                               " with " + std::to_string(labels.size()) + " labels");
  }
  const auto batch = logits.dim(0), classes = logits.dim(1);
  for (std::size_t r = 0; r < batch; ++r) {
    if (labels[r] >= classes) {
      throw Error(ErrorCode::out_of_range, "label " + std::to_string(labels[r]) + " at row " +
                                               std::to_string(r) + " not in [0, " +
                                               std::to_string(classes) + ")");
    }
  }
  Tensor<T> probs({batch, classes});
  T total = T(0);
  for (std::size_t r = 0; r < batch; ++r) {
    const T* z = logits.raw() + r * classes;
    T* p = probs.raw() + r * classes;
    const T peak = *std::max_element(z, z + classes);
    T norm = T(0);
    for (std::size_t c = 0; c < classes; ++c) norm += std::exp(z[c] - peak);
    for (std::size_t c = 0; c < classes; ++c) p[c] = std::exp(z[c] - peak) / norm;
    total += std::log(norm) - (z[labels[r]] - peak);
  }
  Tensor<T> loss = Tensor<T>::scalar(total / T(batch));
  if (tape.wants({&logits})) {
    std::vector<std::size_t> kept(labels.begin(), labels.end());
    tape.record({logits}, loss, [logits, loss, probs, kept, batch, classes]() mutable {
      const T g = Tape<T>::pending(loss)[0] / T(batch);
      auto gz = Tape<T>::pending(logits);
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t c = 0; c < classes; ++c) {
          const T onehot = c == kept[r] ? T(1) : T(0);
          gz[r * classes + c] += g * (probs[r * classes + c] - onehot);
        }
      }
    });
  }
  return {loss, probs};
}

}  // namespace wavemsnet
