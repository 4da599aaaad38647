#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "wavemsnet/config.hpp"
#include "wavemsnet/layers.hpp"

namespace wavemsnet {

/// One time-domain filter bank of the multi-scale front end.
struct ScaleSpec {
  std::size_t filter_size = 11;
  std::size_t stride = 1;
  std::size_t n_filters = 32;
  std::size_t pool_size = 150;
  bool operator==(const ScaleSpec&) const = default;
};

/// One 3x3 conv -> BN -> ReLU -> max-pool stage of the 2-D back end.
struct BackendStage {
  std::size_t channels = 64;
  std::size_t pool_h = 2;
  std::size_t pool_w = 2;
  bool operator==(const BackendStage&) const = default;
};

struct ModelConfig {
  std::vector<ScaleSpec> scales = {{11, 1, 32, 150}, {51, 5, 32, 30}, {101, 10, 32, 15}};
  std::size_t input_length = 66150;
  std::size_t map_rows = 96;
  std::size_t map_frames = 441;
  std::size_t conv2_size = 11;
  std::vector<BackendStage> backend = {{64, 3, 11}, {128, 2, 2}, {256, 2, 2}, {256, 2, 2}};
  std::size_t fc_width = 4096;
  std::size_t n_classes = 50;
  double dropout = 0.5;
  double bn_eps = 1e-5;
  double bn_momentum = 0.9;

  bool operator==(const ModelConfig&) const = default;

  static ModelConfig wavemsnet(std::size_t classes) {
    ModelConfig cfg;
    cfg.n_classes = classes;
    return cfg;
  }

  /// Single-scale ablations with all 96 filters on one scale.
  static ModelConfig single_scale(std::size_t which, std::size_t classes) {
    ModelConfig cfg = wavemsnet(classes);
    ScaleSpec s = cfg.scales.at(which);
    s.n_filters = cfg.map_rows;
    cfg.scales = {s};
    return cfg;
  }
  static ModelConfig srf(std::size_t classes) { return single_scale(0, classes); }
  static ModelConfig mrf(std::size_t classes) { return single_scale(1, classes); }
  static ModelConfig lrf(std::size_t classes) { return single_scale(2, classes); }

  /// Backend map size after stage `i` (i = -1 for the fusion input).
  std::pair<std::size_t, std::size_t> backend_dims(std::ptrdiff_t stage) const {
    std::size_t h = map_rows, w = map_frames;
    for (std::ptrdiff_t i = 0; i <= stage; ++i) {
      h /= backend[static_cast<std::size_t>(i)].pool_h;
      w /= backend[static_cast<std::size_t>(i)].pool_w;
    }
    return {h, w};
  }

  std::size_t flatten_width() const {
    const auto [h, w] = backend_dims(static_cast<std::ptrdiff_t>(backend.size()) - 1);
    return backend.back().channels * h * w;
  }

  /// Throws an Error naming the first dimension equation that fails.
  void validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::config, "model config: " + what); };
    if (scales.empty()) fail("at least one scale is required");
    if (backend.empty()) fail("at least one backend stage is required");
    if (n_classes < 2) fail("n_classes = " + std::to_string(n_classes) + ", need >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
    std::size_t filters = 0;
    for (std::size_t i = 0; i < scales.size(); ++i) {
      const auto& s = scales[i];
      const std::string tag = "scale " + std::to_string(i + 1) + ": ";
      if (s.filter_size == 0 || s.stride == 0 || s.n_filters == 0 || s.pool_size == 0) {
        fail(tag + "filter_size, stride, n_filters and pool_size must be positive");
      }
      if (input_length % s.stride != 0) {
        fail(tag + std::to_string(input_length) + " / " + std::to_string(s.stride) + " is not integral");
      }
      const std::size_t conv_len = input_length / s.stride;
      if (conv_len % s.pool_size != 0 || conv_len / s.pool_size != map_frames) {
        fail(tag + "(" + std::to_string(input_length) + " / " + std::to_string(s.stride) + ") / " +
             std::to_string(s.pool_size) + " = " + std::to_string(map_frames) + " required, got " +
             std::to_string(conv_len) + " / " + std::to_string(s.pool_size));
      }
      filters += s.n_filters;
    }
    if (filters != map_rows) {
      fail("sum of n_filters = " + std::to_string(filters) + ", must equal " + std::to_string(map_rows));
    }
    std::size_t h = map_rows, w = map_frames;
    for (std::size_t i = 0; i < backend.size(); ++i) {
      const auto& b = backend[i];
      if (b.channels == 0 || b.pool_h == 0 || b.pool_w == 0) fail("backend stage sizes must be positive");
      if (h / b.pool_h == 0 || w / b.pool_w == 0) {
        fail("backend stage " + std::to_string(i + 1) + ": " + std::to_string(h) + "x" + std::to_string(w) +
             " pooled by " + std::to_string(b.pool_h) + "x" + std::to_string(b.pool_w) + " is empty");
      }
      h /= b.pool_h;
      w /= b.pool_w;
    }
    if (fc_width == 0) fail("fc_width must be positive");
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    std::string s;
    for (std::size_t i = 0; i < scales.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(scales[i].filter_size) + ":" + std::to_string(scales[i].stride) + ":" +
           std::to_string(scales[i].n_filters) + ":" + std::to_string(scales[i].pool_size);
    }
    kv.set("model.scales", s);
    std::string b;
    for (std::size_t i = 0; i < backend.size(); ++i) {
      if (i) b += ",";
      b += std::to_string(backend[i].channels) + ":" + std::to_string(backend[i].pool_h) + ":" +
           std::to_string(backend[i].pool_w);
    }
    kv.set("model.backend", b);
    kv.set_number("model.input_length", input_length);
    kv.set_number("model.map_rows", map_rows);
    kv.set_number("model.map_frames", map_frames);
    kv.set_number("model.conv2_size", conv2_size);
    kv.set_number("model.fc_width", fc_width);
    kv.set_number("model.n_classes", n_classes);
    kv.set_number("model.dropout", dropout);
    kv.set_number("model.bn_eps", bn_eps);
    kv.set_number("model.bn_momentum", bn_momentum);
    return kv;
  }

  /// Reads `model.*` keys; absent keys keep their defaults. `model.preset`
  /// (wavemsnet, srf, mrf, lrf) selects the scale layout before other keys.
  static ModelConfig from_key_values(const KeyValues& kv) {
    ModelConfig cfg;
    cfg.n_classes = kv.number<std::size_t>("model.n_classes", cfg.n_classes);
    if (auto preset = kv.get("model.preset")) {
      if (*preset == "srf") cfg = srf(cfg.n_classes);
      else if (*preset == "mrf") cfg = mrf(cfg.n_classes);
      else if (*preset == "lrf") cfg = lrf(cfg.n_classes);
      else if (*preset != "wavemsnet") throw Error(ErrorCode::config, "unknown model.preset '" + *preset + "'");
    }
    if (auto s = kv.get("model.scales")) {
      cfg.scales.clear();
      for (const auto& item : split(*s, ',')) {
        const auto f = split(item, ':');
        if (f.size() != 4) throw Error(ErrorCode::config, "model.scales entry '" + item + "' is not size:stride:filters:pool");
        cfg.scales.push_back({KeyValues::parse_number<std::size_t>("model.scales", f[0]),
                              KeyValues::parse_number<std::size_t>("model.scales", f[1]),
                              KeyValues::parse_number<std::size_t>("model.scales", f[2]),
                              KeyValues::parse_number<std::size_t>("model.scales", f[3])});
      }
    }
    if (auto s = kv.get("model.backend")) {
      cfg.backend.clear();
      for (const auto& item : split(*s, ',')) {
        const auto f = split(item, ':');
        if (f.size() != 3) throw Error(ErrorCode::config, "model.backend entry '" + item + "' is not channels:pool_h:pool_w");
        cfg.backend.push_back({KeyValues::parse_number<std::size_t>("model.backend", f[0]),
                               KeyValues::parse_number<std::size_t>("model.backend", f[1]),
                               KeyValues::parse_number<std::size_t>("model.backend", f[2])});
      }
    }
    cfg.input_length = kv.number<std::size_t>("model.input_length", cfg.input_length);
    cfg.map_rows = kv.number<std::size_t>("model.map_rows", cfg.map_rows);
    cfg.map_frames = kv.number<std::size_t>("model.map_frames", cfg.map_frames);
    cfg.conv2_size = kv.number<std::size_t>("model.conv2_size", cfg.conv2_size);
    cfg.fc_width = kv.number<std::size_t>("model.fc_width", cfg.fc_width);
    cfg.dropout = kv.number<double>("model.dropout", cfg.dropout);
    cfg.bn_eps = kv.number<double>("model.bn_eps", cfg.bn_eps);
    cfg.bn_momentum = kv.number<double>("model.bn_momentum", cfg.bn_momentum);
    return cfg;
  }
};

/// Named stage shapes recorded during a forward pass.
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

/// Expected output shape of every traced stage for a given batch size.
inline ShapeTrace expected_shapes(const ModelConfig& cfg, std::size_t batch, bool with_frontend = true) {
  ShapeTrace out;
  if (with_frontend) {
    for (std::size_t i = 0; i < cfg.scales.size(); ++i) {
      const auto& s = cfg.scales[i];
      const std::string p = "scale" + std::to_string(i + 1);
      const std::size_t len = cfg.input_length / s.stride;
      out.push_back({p + ".conv1", {batch, s.n_filters, len}});
      out.push_back({p + ".conv2", {batch, s.n_filters, len}});
      out.push_back({p + ".pool", {batch, s.n_filters, cfg.map_frames}});
    }
    out.push_back({"multiscale", {batch, cfg.map_rows, cfg.map_frames}});
  }
  out.push_back({"fusion", {batch, 2, cfg.map_rows, cfg.map_frames}});
  for (std::size_t i = 0; i < cfg.backend.size(); ++i) {
    const auto [h, w] = cfg.backend_dims(static_cast<std::ptrdiff_t>(i));
    out.push_back({"conv" + std::to_string(i + 3), {batch, cfg.backend[i].channels, h, w}});
  }
  out.push_back({"flatten", {batch, cfg.flatten_width()}});
  out.push_back({"fc1", {batch, cfg.fc_width}});
  out.push_back({"logits", {batch, cfg.n_classes}});
  return out;
}

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool decay = false;     // L2 penalty applies (conv and FC weights only)
  bool frontend = false;  // part of the per-scale Conv1/Conv2 feature extractor
  bool trainable() const { return tensor.requires_grad(); }
};

template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> tensor;
  bool frontend = false;
};

/// Assembles the two-channel fusion input [batch, 2, rows, frames]: channel 0
/// is the multi-scale map, channel 1 the log-mel map.
template <typename T>
Tensor<T> assemble_fusion_input(Tape<T>& tape, const Tensor<T>& msmap, const Tensor<T>& logmel) {
  if (msmap.rank() != 3 || msmap.shape() != logmel.shape()) {
    throw Error(ErrorCode::shape_mismatch, "fusion input: multi-scale map " + to_string(msmap.shape()) +
                                               " vs log-mel " + to_string(logmel.shape()));
  }
  const Shape s{msmap.dim(0), 1, msmap.dim(1), msmap.dim(2)};
  return concat_channels(tape, {reshape(tape, msmap, s), reshape(tape, logmel, s)});
}

struct ForwardOptions {
  Mode mode = Mode::eval;
  std::mt19937_64* rng = nullptr;  // dropout mask source, required for train mode
  ShapeTrace* trace = nullptr;
};

/// The multi-scale waveform network with its two-channel fusion back end.
///
/// The back end always takes two input channels. Calls without a log-mel map
/// feed zeros on channel 1; calls without a waveform feed zeros on channel 0
/// and skip the front end.
template <typename T>
class WaveMsNet {
 public:
  WaveMsNet(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < cfg_.scales.size(); ++i) {
      const auto& s = cfg_.scales[i];
      const std::string p = "scale" + std::to_string(i + 1);
      add_conv(p + ".conv1", {s.n_filters, 1, s.filter_size}, true, rng);
      add_bn(p + ".bn1", s.n_filters, true);
      add_conv(p + ".conv2", {s.n_filters, s.n_filters, cfg_.conv2_size}, true, rng);
      add_bn(p + ".bn2", s.n_filters, true);
    }
    std::size_t in_ch = 2;
    for (std::size_t i = 0; i < cfg_.backend.size(); ++i) {
      const std::string p = std::to_string(i + 3);
      add_conv("conv" + p, {cfg_.backend[i].channels, in_ch, 3, 3}, false, rng);
      add_bn("bn" + p, cfg_.backend[i].channels, false);
      in_ch = cfg_.backend[i].channels;
    }
    add_linear("fc1", cfg_.fc_width, cfg_.flatten_width(), 1.0, rng);
    // Small output gain keeps the initial class distribution near uniform.
    add_linear("fc2", cfg_.n_classes, cfg_.fc_width, 0.1 / std::sqrt(2.0), rng);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::vector<Buffer<T>>& buffers() { return buffers_; }
  const std::vector<Buffer<T>>& buffers() const { return buffers_; }

  Tensor<T>& param(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return p.tensor;
    }
    throw Error(ErrorCode::invalid_argument, "no parameter named '" + name + "'");
  }
  Tensor<T>& buffer(const std::string& name) {
    for (auto& b : buffers_) {
      if (b.name == name) return b.tensor;
    }
    throw Error(ErrorCode::invalid_argument, "no buffer named '" + name + "'");
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  /// Fixes Conv1/Conv2 weights, biases and BN affine parameters, and pins the
  /// front-end BN layers to their running statistics.
  void freeze_frontend() {
    for (auto& p : params_) {
      if (p.frontend) p.tensor.set_requires_grad(false);
    }
    frontend_frozen_ = true;
  }
  bool frontend_frozen() const { return frontend_frozen_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Per-scale Conv1 -> BN -> ReLU -> Conv2 -> BN -> ReLU -> pool, then
  /// concatenation along the filter axis: [batch, map_rows, map_frames].
  Tensor<T> multiscale_map(Tape<T>& tape, const Tensor<T>& waveform, const ForwardOptions& opt) {
    const std::size_t batch = waveform.rank() == 3 ? waveform.dim(0) : 0;
    if (waveform.rank() != 3 || waveform.dim(1) != 1 || waveform.dim(2) != cfg_.input_length) {
      throw Error(ErrorCode::shape_mismatch, "input: waveform " + to_string(waveform.shape()) + ", need (batch, 1, " +
                                                 std::to_string(cfg_.input_length) + ")");
    }
    const Mode bn_mode = frontend_frozen_ ? Mode::eval : opt.mode;
    std::vector<Tensor<T>> maps;
    for (std::size_t i = 0; i < cfg_.scales.size(); ++i) {
      const auto& s = cfg_.scales[i];
      const std::string p = "scale" + std::to_string(i + 1);
      auto h = conv1d(tape, waveform, param(p + ".conv1.weight"), param(p + ".conv1.bias"), s.stride,
                      same_padding(cfg_.input_length, s.filter_size, s.stride));
      check(opt, p + ".conv1", h, batch);
      h = relu(tape, bn(tape, p + ".bn1", h, bn_mode));
      const std::size_t len = h.dim(2);
      h = conv1d(tape, h, param(p + ".conv2.weight"), param(p + ".conv2.bias"), 1,
                 same_padding(len, cfg_.conv2_size, 1));
      check(opt, p + ".conv2", h, batch);
      h = relu(tape, bn(tape, p + ".bn2", h, bn_mode));
      h = maxpool(tape, h, {s.pool_size});
      check(opt, p + ".pool", h, batch);
      maps.push_back(h);
    }
    auto out = concat_channels(tape, maps);
    check(opt, "multiscale", out, batch);
    return out;
  }

  /// Logits [batch, n_classes]. At least one of waveform / logmel is needed.
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>* waveform, const Tensor<T>* logmel,
                    const ForwardOptions& opt = {}) {
    if (!waveform && !logmel) throw Error(ErrorCode::invalid_argument, "forward: no input given");
    if (opt.mode == Mode::train && cfg_.dropout > 0.0 && !opt.rng) {
      throw Error(ErrorCode::invalid_argument, "forward: train mode needs a dropout rng");
    }
    const Shape map_shape_tail{cfg_.map_rows, cfg_.map_frames};
    std::size_t batch = 0;
    Tensor<T> msmap;
    if (waveform) {
      msmap = multiscale_map(tape, *waveform, opt);
      batch = msmap.dim(0);
    }
    Tensor<T> mel;
    if (logmel) {
      if (logmel->rank() != 3 || logmel->dim(1) != cfg_.map_rows || logmel->dim(2) != cfg_.map_frames ||
          (batch && logmel->dim(0) != batch)) {
        throw Error(ErrorCode::shape_mismatch, "input: log-mel " + to_string(logmel->shape()) + ", need (" +
                                                   std::to_string(batch ? batch : logmel->dim(0)) + ", " +
                                                   std::to_string(cfg_.map_rows) + ", " +
                                                   std::to_string(cfg_.map_frames) + ")");
      }
      mel = *logmel;
      batch = mel.dim(0);
    } else {
      mel = Tensor<T>({batch, cfg_.map_rows, cfg_.map_frames});
    }
    if (!waveform) msmap = Tensor<T>({batch, cfg_.map_rows, cfg_.map_frames});

    auto h = assemble_fusion_input(tape, msmap, mel);
    check(opt, "fusion", h, batch);
    for (std::size_t i = 0; i < cfg_.backend.size(); ++i) {
      const std::string p = std::to_string(i + 3);
      h = conv2d(tape, h, param("conv" + p + ".weight"), param("conv" + p + ".bias"), {1, 1, 1, 1});
      h = relu(tape, bn(tape, "bn" + p, h, opt.mode));
      h = maxpool(tape, h, {cfg_.backend[i].pool_h, cfg_.backend[i].pool_w});
      check(opt, "conv" + p, h, batch);
    }
    h = reshape(tape, h, {batch, cfg_.flatten_width()});
    check(opt, "flatten", h, batch);
    h = relu(tape, linear(tape, h, param("fc1.weight"), param("fc1.bias")));
    check(opt, "fc1", h, batch);
    if (opt.mode == Mode::train && cfg_.dropout > 0.0) h = dropout(tape, h, cfg_.dropout, opt.mode, *opt.rng);
    auto logits = linear(tape, h, param("fc2.weight"), param("fc2.bias"));
    check(opt, "logits", logits, batch);
    return logits;
  }

 private:
  void add_conv(const std::string& name, Shape shape, bool frontend, std::mt19937_64& rng) {
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
    const std::size_t out = shape[0];
    params_.push_back({name + ".weight", he_normal(std::move(shape), fan_in, 1.0, rng), true, frontend});
    params_.push_back({name + ".bias", trainable(Tensor<T>({out})), false, frontend});
  }

  void add_linear(const std::string& name, std::size_t out, std::size_t in, double gain, std::mt19937_64& rng) {
    params_.push_back({name + ".weight", he_normal({out, in}, in, gain, rng), true, false});
    params_.push_back({name + ".bias", trainable(Tensor<T>({out})), false, false});
  }

  void add_bn(const std::string& name, std::size_t channels, bool frontend) {
    params_.push_back({name + ".gamma", trainable(Tensor<T>({channels}, T(1))), false, frontend});
    params_.push_back({name + ".beta", trainable(Tensor<T>({channels})), false, frontend});
    buffers_.push_back({name + ".running_mean", Tensor<T>({channels}), frontend});
    buffers_.push_back({name + ".running_var", Tensor<T>({channels}, T(1)), frontend});
  }

  static Tensor<T> trainable(Tensor<T> t) {
    t.set_requires_grad(true);
    return t;
  }

  // N(0, gain^2 * 2 / fan_in), drawn in double so float and double models
  // built from one seed agree up to rounding.
  static Tensor<T> he_normal(Shape shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / double(fan_in)));
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    return trainable(t);
  }

  Tensor<T> bn(Tape<T>& tape, const std::string& name, const Tensor<T>& x, Mode mode) {
    return batchnorm(tape, x, param(name + ".gamma"), param(name + ".beta"), buffer(name + ".running_mean"),
                     buffer(name + ".running_var"), mode, cfg_.bn_eps, cfg_.bn_momentum);
  }

  void check(const ForwardOptions& opt, const std::string& stage, const Tensor<T>& t, std::size_t batch) const {
    if (expected_.empty() || expected_batch_ != batch) {
      expected_ = expected_shapes(cfg_, batch, true);
      expected_batch_ = batch;
    }
    for (const auto& [name, shape] : expected_) {
      if (name == stage) {
        if (t.shape() != shape) {
          throw Error(ErrorCode::shape_mismatch,
                      "layer " + stage + ": output " + to_string(t.shape()) + ", expected " + to_string(shape));
        }
        break;
      }
    }
    if (opt.trace) opt.trace->push_back({stage, t.shape()});
  }

  ModelConfig cfg_;
  std::vector<Parameter<T>> params_;
  std::vector<Buffer<T>> buffers_;
  bool frontend_frozen_ = false;
  mutable ShapeTrace expected_;
  mutable std::size_t expected_batch_ = 0;
};

}  // namespace wavemsnet
