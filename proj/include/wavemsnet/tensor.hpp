#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "wavemsnet/error.hpp"

namespace wavemsnet {

// 64-byte aligned so that GEMM kernels see the same alignment on every run.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Row-major linear offset of a multi-index.
inline std::size_t linearize(const Shape& shape, std::span<const std::size_t> index) {
  if (index.size() != shape.size()) {
    throw Error(ErrorCode::shape_mismatch,
                "index rank " + std::to_string(index.size()) + " vs shape " + to_string(shape));
  }
  std::size_t offset = 0;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (index[d] >= shape[d]) {
      throw Error(ErrorCode::out_of_range, "index out of bounds for shape " + to_string(shape));
    }
    offset = offset * shape[d] + index[d];
  }
  return offset;
}

inline std::vector<std::size_t> delinearize(const Shape& shape, std::size_t offset) {
  if (offset >= shape_size(shape)) {
    throw Error(ErrorCode::out_of_range, "offset out of bounds for shape " + to_string(shape));
  }
  std::vector<std::size_t> index(shape.size());
  for (std::size_t d = shape.size(); d-- > 0;) {
    index[d] = offset % shape[d];
    offset /= shape[d];
  }
  return index;
}

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorStorage {
  Shape shape;
  AlignedVector<T> data;
  AlignedVector<T> grad;
  // Gradient flowing through the current backward pass.
  AlignedVector<T> pending;
  bool requires_grad = false;
  bool is_leaf = true;
};

}  // namespace detail

/// Dense row-major array with an optional gradient slot.
///
/// Tensors are handles: copying a Tensor shares the underlying storage, which
/// is what lets a Tape refer back to the values it recorded. Use clone() for a
/// deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}) {}

  explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<detail::TensorStorage<T>>()) {
    for (auto extent : shape) {
      if (extent == 0) {
        throw Error(ErrorCode::invalid_argument, "zero extent in shape " + to_string(shape));
      }
    }
    s_->data.assign(shape_size(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::span<const T> values) : Tensor(std::move(shape)) {
    if (values.size() != s_->data.size()) {
      throw Error(ErrorCode::shape_mismatch, "data length " + std::to_string(values.size()) +
                                                 " does not match shape " + to_string(s_->shape));
    }
    std::copy(values.begin(), values.end(), s_->data.begin());
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  const Shape& shape() const noexcept { return s_->shape; }
  std::size_t rank() const noexcept { return s_->shape.size(); }
  std::size_t size() const noexcept { return s_->data.size(); }
  std::size_t dim(std::size_t axis) const { return s_->shape.at(axis); }

  std::span<T> data() noexcept { return s_->data; }
  std::span<const T> data() const noexcept { return s_->data; }
  T* raw() noexcept { return s_->data.data(); }
  const T* raw() const noexcept { return s_->data.data(); }

  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }

  T& at(std::initializer_list<std::size_t> index) {
    return s_->data[linearize(s_->shape, std::span(index.begin(), index.size()))];
  }
  const T& at(std::initializer_list<std::size_t> index) const {
    return s_->data[linearize(s_->shape, std::span(index.begin(), index.size()))];
  }

  T item() const {
    if (size() != 1) {
      throw Error(ErrorCode::shape_mismatch, "item() on non-scalar tensor " + to_string(shape()));
    }
    return s_->data[0];
  }

  bool requires_grad() const noexcept { return s_->requires_grad; }
  Tensor& set_requires_grad(bool value) {
    s_->requires_grad = value;
    return *this;
  }
  bool is_leaf() const noexcept { return s_->is_leaf; }

  bool has_grad() const noexcept { return !s_->grad.empty(); }
  std::span<T> grad() noexcept { return s_->grad; }
  std::span<const T> grad() const noexcept { return s_->grad; }
  void zero_grad() { s_->grad.clear(); }
  /// Gradient slot, allocated as zeros if absent.
  std::span<T> ensure_grad() {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }

  Tensor clone() const {
    Tensor copy(s_->shape);
    copy.s_->data = s_->data;
    return copy;
  }

  bool same_storage(const Tensor& other) const noexcept { return s_ == other.s_; }

 private:
  friend class Tape<T>;

  explicit Tensor(std::shared_ptr<detail::TensorStorage<T>> storage) : s_(std::move(storage)) {}

  std::shared_ptr<detail::TensorStorage<T>> s_;
};

/// Records differentiable operations in execution order and replays their
/// backward rules in reverse.
///
/// A tape and the tensors it records belong to one thread.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void()>;

  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

  /// True when an op over these inputs must be recorded.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t && t->requires_grad(); });
  }

  /// Marks `output` as produced from `inputs` and stores its backward rule.
  void record(std::vector<Tensor<T>> inputs, Tensor<T>& output, Backward backward) {
    output.s_->requires_grad = true;
    output.s_->is_leaf = false;
    entries_.push_back(Entry{std::move(inputs), output, std::move(backward)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Gradient of the current backward pass w.r.t. `t`, allocated on demand.
  static std::span<T> pending(const Tensor<T>& t) {
    auto& s = *t.s_;
    if (s.pending.empty()) s.pending.assign(s.data.size(), T(0));
    return s.pending;
  }
  static bool has_pending(const Tensor<T>& t) { return !t.s_->pending.empty(); }

  /// Reverse-mode sweep from a scalar loss. Leaf tensors accumulate into their
  /// grad slot; intermediate tensors receive this pass's gradient only.
  void backward(Tensor<T>& loss) {
    if (loss.size() != 1) {
      throw Error(ErrorCode::shape_mismatch,
                  "backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    std::vector<detail::TensorStorage<T>*> touched;
    std::unordered_set<detail::TensorStorage<T>*> seen;
    auto touch = [&](const Tensor<T>& t) {
      if (seen.insert(t.s_.get()).second) {
        touched.push_back(t.s_.get());
        t.s_->pending.clear();
      }
    };
    touch(loss);
    for (auto& e : entries_) {
      touch(e.output);
      for (auto& in : e.inputs) touch(in);
    }

    pending(loss)[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (has_pending(it->output)) it->backward();
    }

    for (auto* s : touched) {
      if (!s->requires_grad || s->pending.empty()) {
        s->pending.clear();
        continue;
      }
      if (s->is_leaf) {
        if (s->grad.empty()) s->grad.assign(s->data.size(), T(0));
        for (std::size_t i = 0; i < s->grad.size(); ++i) s->grad[i] += s->pending[i];
        s->pending.clear();
      } else {
        s->grad.swap(s->pending);
        s->pending.clear();
      }
    }
  }

 private:
  struct Entry {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    Backward backward;
  };

  bool recording_ = true;
  std::vector<Entry> entries_;
};

}  // namespace wavemsnet
