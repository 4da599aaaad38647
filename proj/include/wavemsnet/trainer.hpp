#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "wavemsnet/checkpoint.hpp"
#include "wavemsnet/dsp.hpp"
#include "wavemsnet/model.hpp"
#include "wavemsnet/optim.hpp"

namespace wavemsnet {

enum class TrainMode {
  phase1_waveform,
  phase2_fusion_frozen,
  phase2_fusion_unfrozen,
  one_phase_fusion,
  logmel_only_backend,
};

/// Which channels a model is fed with.
enum class InputKind { waveform, fusion, logmel };

inline InputKind input_kind(TrainMode mode) {
  switch (mode) {
    case TrainMode::phase1_waveform: return InputKind::waveform;
    case TrainMode::logmel_only_backend: return InputKind::logmel;
    default: return InputKind::fusion;
  }
}

inline std::string phase_tag(TrainMode mode) {
  switch (mode) {
    case TrainMode::phase1_waveform: return "phase1";
    case TrainMode::phase2_fusion_frozen:
    case TrainMode::phase2_fusion_unfrozen: return "phase2";
    case TrainMode::one_phase_fusion: return "onephase";
    case TrainMode::logmel_only_backend: return "logmel";
  }
  return "";
}

inline std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::phase1_waveform: return "phase1_waveform";
    case TrainMode::phase2_fusion_frozen: return "phase2_fusion_frozen";
    case TrainMode::phase2_fusion_unfrozen: return "phase2_fusion_unfrozen";
    case TrainMode::one_phase_fusion: return "one_phase_fusion";
    case TrainMode::logmel_only_backend: return "logmel_only_backend";
  }
  return "";
}

inline TrainMode train_mode_from_string(const std::string& s) {
  for (auto m : {TrainMode::phase1_waveform, TrainMode::phase2_fusion_frozen, TrainMode::phase2_fusion_unfrozen,
                 TrainMode::one_phase_fusion, TrainMode::logmel_only_backend}) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorCode::config, "unknown training mode '" + s + "'");
}

/// Input kind a checkpoint was trained for, read from its mode tag.
inline InputKind input_kind(const Checkpoint& ckpt) {
  const auto mode = ckpt.meta.get("train.mode");
  if (!mode) throw Error(ErrorCode::format, "checkpoint has no train.mode entry");
  return input_kind(train_mode_from_string(*mode));
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double train_acc = 0.0;
  double wall_seconds = 0.0;
};

inline std::string format_number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline constexpr const char* kMetricsHeader = "epoch,lr,mean_loss,train_acc,wall_seconds\n";

inline std::string metrics_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + "," + format_number(m.lr) + "," + format_number(m.mean_loss) + "," +
         format_number(m.train_acc) + "," + format_number(m.wall_seconds) + "\n";
}

/// A training batch: waveform [B,1,len], log-mel [B,rows,frames] (either may
/// be absent depending on the input kind) and labels.
template <typename T>
struct Batch {
  std::optional<Tensor<T>> waveform;
  std::optional<Tensor<T>> logmel;
  std::vector<std::size_t> labels;
};

/// Builds a batch from already-cropped windows. The log-mel map is computed on
/// the same window the waveform channel sees.
template <typename T>
Batch<T> make_batch(const std::vector<std::vector<float>>& windows, std::vector<std::size_t> labels, InputKind kind,
                    LogMelExtractor& extractor) {
  const std::size_t n = windows.size();
  const std::size_t len = windows.at(0).size();
  Batch<T> batch;
  batch.labels = std::move(labels);
  if (kind != InputKind::logmel) {
    Tensor<T> w({n, 1, len});
    for (std::size_t b = 0; b < n; ++b) std::copy(windows[b].begin(), windows[b].end(), w.raw() + b * len);
    batch.waveform = w;
  }
  if (kind != InputKind::waveform) {
    const auto& c = extractor.config();
    Tensor<T> m({n, c.n_mels, c.frames_out});
    const std::size_t plane = c.n_mels * c.frames_out;
    for (std::size_t b = 0; b < n; ++b) {
      const auto map = extractor(windows[b]);
      std::transform(map.data().begin(), map.data().end(), m.raw() + b * plane,
                     [](double v) { return static_cast<T>(v); });
    }
    batch.logmel = m;
  }
  return batch;
}

/// Epoch-at-a-time momentum-SGD training of one model in one mode.
///
/// Each epoch shuffles the clips, takes one random window per clip, and runs
/// batches in order with the final short batch kept. One seeded generator
/// drives shuffling, cropping and dropout, so a run is a pure function of
/// (model, clips, schedule).
template <typename T>
class Trainer {
 public:
  Trainer(WaveMsNet<T>& model, TrainMode mode, TrainSchedule schedule, LogMelConfig logmel = {})
      : model_(model), mode_(mode), schedule_(std::move(schedule)), extractor_(logmel), rng_(schedule_.seed) {
    schedule_.validate();
    if (mode_ == TrainMode::phase2_fusion_frozen) model_.freeze_frontend();
  }

  TrainMode mode() const { return mode_; }
  const TrainSchedule& schedule() const { return schedule_; }
  std::size_t epoch() const { return epoch_; }
  bool finished() const { return epoch_ >= schedule_.epochs; }
  SgdState<T>& state() { return state_; }
  const std::vector<EpochMetrics>& history() const { return history_; }

  /// Forward + backward + update on one batch. Returns the batch loss and
  /// writes the number of correct argmax predictions.
  double step(const Batch<T>& batch, double lr, std::size_t* correct = nullptr) {
    Tape<T> tape;
    model_.zero_grad();
    ForwardOptions opt{Mode::train, &rng_, nullptr};
    const auto logits = model_.forward(tape, batch.waveform ? &*batch.waveform : nullptr,
                                       batch.logmel ? &*batch.logmel : nullptr, opt);
    auto ce = softmax_cross_entropy(tape, logits, std::span<const std::size_t>(batch.labels));
    if (!std::isfinite(static_cast<double>(ce.loss.item()))) {
      throw Error(ErrorCode::numeric, "non-finite loss at epoch " + std::to_string(epoch_));
    }
    tape.backward(ce.loss);
    sgd_step(model_.parameters(), state_, lr, schedule_.momentum, schedule_.weight_decay);
    if (correct) {
      const std::size_t classes = logits.dim(1);
      for (std::size_t r = 0; r < batch.labels.size(); ++r) {
        const T* p = ce.probs.raw() + r * classes;
        const auto arg = static_cast<std::size_t>(std::max_element(p, p + classes) - p);
        if (arg == batch.labels[r]) ++*correct;
      }
    }
    return static_cast<double>(ce.loss.item());
  }

  EpochMetrics run_epoch(const std::vector<AudioClip>& clips) {
    if (clips.empty()) throw Error(ErrorCode::invalid_argument, "training set is empty");
    if (finished()) throw Error(ErrorCode::state, "schedule already finished");
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = lr_at(epoch_, schedule_);
    const std::size_t classes = model_.config().n_classes;
    for (const auto& c : clips) {
      if (c.label >= classes) {
        throw Error(ErrorCode::out_of_range, "clip " + c.id + " has label " + std::to_string(c.label) +
                                                 " for a " + std::to_string(classes) + "-class model");
      }
    }
    std::vector<std::size_t> order(clips.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);

    const auto kind = input_kind(mode_);
    const std::size_t len = model_.config().input_length;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += schedule_.batch_size) {
      const std::size_t end = std::min(order.size(), start + schedule_.batch_size);
      std::vector<std::vector<float>> windows;
      std::vector<std::size_t> labels;
      for (std::size_t i = start; i < end; ++i) {
        const auto& clip = clips[order[i]];
        windows.push_back(random_crop(std::span<const float>(clip.samples), rng_, len));
        labels.push_back(clip.label);
      }
      const auto batch = make_batch<T>(windows, std::move(labels), kind, extractor_);
      loss_sum += step(batch, lr, &correct) * double(end - start);
    }
    EpochMetrics m;
    m.epoch = epoch_;
    m.lr = lr;
    m.mean_loss = loss_sum / double(clips.size());
    m.train_acc = double(correct) / double(clips.size());
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history_.push_back(m);
    ++epoch_;
    return m;
  }

  /// Meta block for checkpoints: phase tag, mode, progress, schedule and
  /// log-mel settings.
  KeyValues meta() const {
    KeyValues kv;
    kv.set("phase", phase_tag(mode_));
    kv.set("train.mode", to_string(mode_));
    kv.set_number("train.epochs_done", epoch_);
    kv.set("train.frozen", model_.frontend_frozen() ? "1" : "0");
    kv.merge(schedule_.to_key_values());
    kv.merge(logmel_key_values(extractor_.config()));
    return kv;
  }

  Checkpoint checkpoint() const { return capture(model_, &state_, meta()); }

 private:
  WaveMsNet<T>& model_;
  TrainMode mode_;
  TrainSchedule schedule_;
  LogMelExtractor extractor_;
  std::mt19937_64 rng_;
  SgdState<T> state_;
  std::size_t epoch_ = 0;
  std::vector<EpochMetrics> history_;
};

struct TrainOptions {
  std::filesystem::path out_dir;       // empty: nothing written
  std::size_t checkpoint_every = 0;    // 0: only at the end
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> metrics;
};

/// Full schedule. Writes metrics.csv, <tag>.ckpt and periodic
/// <tag>-epoch<N>.ckpt files to `opts.out_dir` when set.
template <typename T>
TrainResult train(WaveMsNet<T>& model, const std::vector<AudioClip>& clips, TrainMode mode,
                  const TrainSchedule& schedule, const LogMelConfig& logmel = {}, const TrainOptions& opts = {}) {
  if (clips.empty()) throw Error(ErrorCode::invalid_argument, "training set is empty");
  Trainer<T> trainer(model, mode, schedule, logmel);
  std::ofstream metrics;
  const std::string tag = phase_tag(mode);
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    metrics.open(opts.out_dir / "metrics.csv", std::ios::binary);
    if (!metrics) throw Error(ErrorCode::io, "cannot write " + (opts.out_dir / "metrics.csv").string());
    metrics << kMetricsHeader;
  }
  while (!trainer.finished()) {
    const auto m = trainer.run_epoch(clips);
    if (metrics.is_open()) metrics << metrics_row(m) << std::flush;
    if (!opts.out_dir.empty() && opts.checkpoint_every && trainer.epoch() % opts.checkpoint_every == 0 &&
        !trainer.finished()) {
      save_checkpoint(trainer.checkpoint(), opts.out_dir / (tag + "-epoch" + std::to_string(trainer.epoch()) + ".ckpt"));
    }
  }
  TrainResult result{trainer.checkpoint(), trainer.history()};
  if (!opts.out_dir.empty()) save_checkpoint(result.checkpoint, opts.out_dir / (tag + ".ckpt"));
  return result;
}

/// Phase-2 entry point: rebuilds the model from a phase-1 checkpoint and
/// trains it with the log-mel channel filled in.
template <typename T>
TrainResult train_phase2(const Checkpoint& phase1, const std::vector<AudioClip>& clips, const TrainSchedule& schedule,
                         bool frozen, const LogMelConfig& logmel = {}, const TrainOptions& opts = {},
                         WaveMsNet<T>* out_model = nullptr) {
  if (phase1.phase() != "phase1") {
    throw Error(ErrorCode::state, "phase 2 needs a phase1 checkpoint, got phase tag '" + phase1.phase() + "'");
  }
  WaveMsNet<T> model = model_from_checkpoint<T>(phase1);
  auto result = train(model, clips, frozen ? TrainMode::phase2_fusion_frozen : TrainMode::phase2_fusion_unfrozen,
                      schedule, logmel, opts);
  if (out_model) *out_model = std::move(model);
  return result;
}

/// Elementwise mean of two class distributions.
inline std::vector<double> ensemble_average(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::shape_mismatch, "ensemble_average: lengths " + std::to_string(a.size()) + " and " +
                                               std::to_string(b.size()));
  }
  for (auto s : {std::accumulate(a.begin(), a.end(), 0.0), std::accumulate(b.begin(), b.end(), 0.0)}) {
    if (std::abs(s - 1.0) > 1e-6) {
      throw Error(ErrorCode::invalid_argument, "ensemble_average: input sums to " + format_number(s) + ", not 1");
    }
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = 0.5 * (a[i] + b[i]);
  return out;
}

}  // namespace wavemsnet
