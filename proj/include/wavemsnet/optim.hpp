#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "wavemsnet/config.hpp"
#include "wavemsnet/model.hpp"

namespace wavemsnet {

/// Momentum buffers keyed by parameter name, in first-use order.
template <typename T>
class SgdState {
 public:
  Tensor<T>& slot(const std::string& name, const Shape& shape) {
    if (auto* t = find(name)) {
      if (t->shape() != shape) {
        throw Error(ErrorCode::shape_mismatch, "momentum buffer '" + name + "' has shape " + to_string(t->shape()) +
                                                   ", parameter has " + to_string(shape));
      }
      return *t;
    }
    velocity_.emplace_back(name, Tensor<T>(shape));
    return velocity_.back().second;
  }

  Tensor<T>* find(const std::string& name) {
    for (auto& [n, t] : velocity_) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return velocity_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return velocity_; }
  void clear() { velocity_.clear(); }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> velocity_;
};

/// g' = g + wd * p (decayed parameters only), v = momentum * v + g',
/// p -= lr * v. Frozen parameters and parameters without a gradient are left
/// alone. Non-finite gradients abort before anything is modified.
template <typename T>
void sgd_step(std::vector<Parameter<T>>& params, SgdState<T>& state, double lr, double momentum,
              double weight_decay) {
  for (const auto& p : params) {
    if (!p.trainable() || !p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw Error(ErrorCode::numeric, "non-finite gradient in '" + p.name + "' at element " + std::to_string(i));
      }
    }
  }
  const T lr_t = static_cast<T>(lr), mom = static_cast<T>(momentum), wd = static_cast<T>(weight_decay);
  for (auto& p : params) {
    if (!p.trainable() || !p.tensor.has_grad()) continue;
    auto& v = state.slot(p.name, p.tensor.shape());
    auto w = p.tensor.data();
    const auto g = std::as_const(p.tensor).grad();
    auto vel = v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = p.decay ? g[i] + wd * w[i] : g[i];
      vel[i] = mom * vel[i] + gi;
      w[i] -= lr_t * vel[i];
    }
  }
}

struct LrSegment {
  std::size_t first = 0;  // inclusive
  std::size_t last = 0;   // inclusive
  double lr = 0.0;
  bool operator==(const LrSegment&) const = default;
};

struct TrainSchedule {
  std::size_t epochs = 180;
  std::vector<LrSegment> segments = {{0, 49, 1e-2}, {50, 99, 1e-3}, {100, 149, 1e-4}, {150, 179, 1e-5}};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::config, "schedule: " + m); };
    if (epochs == 0) fail("epochs must be positive");
    if (batch_size == 0) fail("batch_size must be positive");
    if (segments.empty()) fail("no learning-rate segments");
    std::size_t next = 0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const auto& s = segments[i];
      if (s.first != next || s.last < s.first) {
        fail("segment " + std::to_string(i) + " [" + std::to_string(s.first) + ", " + std::to_string(s.last) +
             "] does not continue from epoch " + std::to_string(next));
      }
      if (!(s.lr > 0.0)) fail("segment " + std::to_string(i) + " has non-positive lr");
      if (i > 0 && !(s.lr < segments[i - 1].lr)) fail("lr must strictly decrease across segments");
      next = s.last + 1;
    }
    if (next != epochs) fail("segments end at " + std::to_string(next) + ", epochs = " + std::to_string(epochs));
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must be in [0, 1)");
    if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  }

  /// The same schedule cut after `n` epochs.
  TrainSchedule truncated(std::size_t n) const {
    TrainSchedule out = *this;
    out.epochs = n;
    out.segments.clear();
    for (const auto& s : segments) {
      if (s.first >= n) break;
      out.segments.push_back({s.first, std::min(s.last, n - 1), s.lr});
    }
    return out;
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set_number("train.epochs", epochs);
    std::string segs;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      char buf[32];
      const auto r = std::to_chars(buf, buf + sizeof(buf), segments[i].lr);
      if (i) segs += ",";
      segs += std::to_string(segments[i].first) + "-" + std::to_string(segments[i].last) + ":" +
              std::string(buf, r.ptr);
    }
    kv.set("train.lr_segments", segs);
    kv.set_number("train.momentum", momentum);
    kv.set_number("train.weight_decay", weight_decay);
    kv.set_number("train.batch_size", batch_size);
    kv.set_number("train.seed", seed);
    return kv;
  }

  /// `train.lr_segments` replaces the segment list; otherwise a smaller
  /// `train.epochs` truncates the default schedule.
  static TrainSchedule from_key_values(const KeyValues& kv) {
    TrainSchedule s;
    if (auto segs = kv.get("train.lr_segments")) {
      s.segments.clear();
      for (const auto& item : split(*segs, ',')) {
        const auto colon = split(item, ':');
        const auto range = colon.size() == 2 ? split(colon[0], '-') : std::vector<std::string>{};
        if (range.size() != 2) throw Error(ErrorCode::config, "train.lr_segments entry '" + item + "' is not a-b:lr");
        s.segments.push_back({KeyValues::parse_number<std::size_t>("train.lr_segments", range[0]),
                              KeyValues::parse_number<std::size_t>("train.lr_segments", range[1]),
                              KeyValues::parse_number<double>("train.lr_segments", colon[1])});
      }
      s.epochs = s.segments.back().last + 1;
      s.epochs = kv.number<std::size_t>("train.epochs", s.epochs);
    } else if (kv.contains("train.epochs")) {
      s = s.truncated(kv.require_number<std::size_t>("train.epochs"));
    }
    s.momentum = kv.number<double>("train.momentum", s.momentum);
    s.weight_decay = kv.number<double>("train.weight_decay", s.weight_decay);
    s.batch_size = kv.number<std::size_t>("train.batch_size", s.batch_size);
    s.seed = kv.number<std::uint64_t>("train.seed", s.seed);
    s.validate();
    return s;
  }
};

inline double lr_at(std::size_t epoch, const TrainSchedule& schedule) {
  if (epoch >= schedule.epochs) {
    throw Error(ErrorCode::out_of_range,
                "epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(schedule.epochs) + ")");
  }
  for (const auto& s : schedule.segments) {
    if (epoch >= s.first && epoch <= s.last) return s.lr;
  }
  throw Error(ErrorCode::config, "no learning-rate segment covers epoch " + std::to_string(epoch));
}

}  // namespace wavemsnet
