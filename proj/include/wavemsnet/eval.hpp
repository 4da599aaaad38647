#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "wavemsnet/checkpoint.hpp"
#include "wavemsnet/dsp.hpp"
#include "wavemsnet/model.hpp"
#include "wavemsnet/trainer.hpp"

namespace wavemsnet {

struct VoteConfig {
  std::size_t n_windows = 10;
  std::size_t window_len = kWindowLength;

  void validate() const {
    if (n_windows == 0) throw Error(ErrorCode::config, "vote.n_windows must be at least 1");
    if (window_len == 0) throw Error(ErrorCode::config, "vote window length must be positive");
  }
};

/// Evenly spaced window starts from 0 to length - window_len inclusive. A clip
/// no longer than one window gets a single zero-padded window.
inline std::vector<std::size_t> window_starts(std::size_t length, const VoteConfig& cfg) {
  cfg.validate();
  if (length <= cfg.window_len || cfg.n_windows == 1) return {0};
  const std::size_t span = length - cfg.window_len;
  std::vector<std::size_t> starts(cfg.n_windows);
  for (std::size_t i = 0; i < cfg.n_windows; ++i) starts[i] = i * span / (cfg.n_windows - 1);
  return starts;
}

struct VoteResult {
  std::size_t predicted = 0;
  std::vector<double> probs;
};

/// First index of the maximum.
inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Arithmetic mean of per-window distributions, then argmax.
inline VoteResult vote(const std::vector<std::vector<double>>& window_probs) {
  if (window_probs.empty()) throw Error(ErrorCode::invalid_argument, "vote: no windows");
  VoteResult r;
  r.probs.assign(window_probs.front().size(), 0.0);
  for (const auto& p : window_probs) {
    if (p.size() != r.probs.size()) throw Error(ErrorCode::shape_mismatch, "vote: windows disagree on class count");
    for (std::size_t c = 0; c < p.size(); ++c) r.probs[c] += p[c];
  }
  for (auto& v : r.probs) v /= double(window_probs.size());
  r.predicted = argmax(r.probs);
  return r;
}

inline std::vector<double> softmax_row(std::span<const double> z) {
  const double peak = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double norm = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) norm += (p[i] = std::exp(z[i] - peak));
  for (auto& v : p) v /= norm;
  return p;
}

/// Softmax of the eval-mode logits of every voting window of `clip`.
template <typename T>
std::vector<std::vector<double>> window_probabilities(WaveMsNet<T>& model, InputKind kind, const AudioClip& clip,
                                                      const VoteConfig& cfg, LogMelExtractor& extractor) {
  std::vector<std::vector<float>> windows;
  for (auto s : window_starts(clip.samples.size(), cfg)) {
    windows.push_back(crop_window(std::span<const float>(clip.samples), s, cfg.window_len));
  }
  const auto batch = make_batch<T>(windows, std::vector<std::size_t>(windows.size(), 0), kind, extractor);
  Tape<T> tape;
  tape.set_recording(false);
  const auto logits = model.forward(tape, batch.waveform ? &*batch.waveform : nullptr,
                                    batch.logmel ? &*batch.logmel : nullptr, ForwardOptions{Mode::eval});
  const std::size_t classes = logits.dim(1);
  std::vector<std::vector<double>> out;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    std::vector<double> z(classes);
    for (std::size_t c = 0; c < classes; ++c) z[c] = static_cast<double>(logits[w * classes + c]);
    out.push_back(softmax_row(z));
  }
  return out;
}

template <typename T>
VoteResult vote_predict(WaveMsNet<T>& model, InputKind kind, const AudioClip& clip, const VoteConfig& cfg,
                        LogMelExtractor& extractor) {
  return vote(window_probabilities(model, kind, clip, cfg, extractor));
}

using ClipPredictor = std::function<VoteResult(const AudioClip&)>;

/// Voting predictor for one model.
template <typename T>
ClipPredictor model_predictor(WaveMsNet<T>& model, InputKind kind, VoteConfig cfg, LogMelConfig logmel = {}) {
  auto extractor = std::make_shared<LogMelExtractor>(logmel);
  return [&model, kind, cfg, extractor](const AudioClip& clip) {
    return vote_predict(model, kind, clip, cfg, *extractor);
  };
}

/// Two-model combination: the voted distributions are averaged.
inline ClipPredictor ensemble_predictor(ClipPredictor a, ClipPredictor b) {
  return [a = std::move(a), b = std::move(b)](const AudioClip& clip) {
    const auto pa = a(clip), pb = b(clip);
    VoteResult r;
    r.probs = ensemble_average(pa.probs, pb.probs);
    r.predicted = argmax(r.probs);
    return r;
  };
}

struct ClipResult {
  std::string id;
  std::size_t truth = 0;
  std::size_t predicted = 0;
  std::vector<double> probs;
};

struct FoldReport {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][predicted]
  std::vector<ClipResult> clips;                    // ordered by clip id
};

inline FoldReport evaluate_clips(const std::vector<AudioClip>& clips, std::size_t n_classes,
                                 const ClipPredictor& predict) {
  if (clips.empty()) throw Error(ErrorCode::invalid_argument, "evaluation set is empty");
  std::vector<std::size_t> order(clips.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return clips[a].id < clips[b].id; });
  FoldReport rep;
  rep.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  for (auto i : order) {
    const auto& clip = clips[i];
    if (clip.label >= n_classes) {
      throw Error(ErrorCode::out_of_range, "clip " + clip.id + " label " + std::to_string(clip.label) +
                                               " outside " + std::to_string(n_classes) + " classes");
    }
    auto r = predict(clip);
    if (r.predicted >= n_classes) throw Error(ErrorCode::out_of_range, "prediction outside class range");
    ++rep.confusion[clip.label][r.predicted];
    if (r.predicted == clip.label) ++rep.correct;
    rep.clips.push_back({clip.id, clip.label, r.predicted, std::move(r.probs)});
  }
  rep.accuracy = double(rep.correct) / double(clips.size());
  return rep;
}

template <typename T>
FoldReport evaluate_fold(WaveMsNet<T>& model, InputKind kind, const std::vector<AudioClip>& test_clips,
                         const VoteConfig& cfg, const LogMelConfig& logmel = {}) {
  return evaluate_clips(test_clips, model.config().n_classes, model_predictor(model, kind, cfg, logmel));
}

/// Unweighted mean of per-fold accuracies.
inline double cross_validation_mean(std::span<const double> fold_accuracies) {
  if (fold_accuracies.empty()) throw Error(ErrorCode::invalid_argument, "no fold accuracies");
  return std::accumulate(fold_accuracies.begin(), fold_accuracies.end(), 0.0) / double(fold_accuracies.size());
}

inline std::string confusion_csv(const FoldReport& rep) {
  std::string out = "truth";
  for (std::size_t c = 0; c < rep.confusion.size(); ++c) out += ",pred" + std::to_string(c);
  out += "\n";
  for (std::size_t t = 0; t < rep.confusion.size(); ++t) {
    out += std::to_string(t);
    for (auto n : rep.confusion[t]) out += "," + std::to_string(n);
    out += "\n";
  }
  return out;
}

inline std::string clip_log_csv(const FoldReport& rep) {
  std::string out = "id,truth,predicted";
  if (!rep.clips.empty()) {
    for (std::size_t c = 0; c < rep.clips.front().probs.size(); ++c) out += ",p" + std::to_string(c);
  }
  out += "\n";
  for (const auto& c : rep.clips) {
    out += c.id + "," + std::to_string(c.truth) + "," + std::to_string(c.predicted);
    for (double p : c.probs) out += "," + format_number(p);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Learned filter analysis

inline constexpr std::size_t kResponseFft = 2048;

struct FilterResponse {
  std::size_t scale = 0;  // 1-based
  std::size_t filter = 0;
  std::size_t rank = 0;   // position after sorting by center frequency
  std::vector<double> spectrum;  // |H| at bins 0..kResponseFft/2
  double center_hz = 0.0;
  std::size_t low_bin = 0;   // -3 dB band around the peak, inclusive
  std::size_t high_bin = 0;
  double bandwidth_hz = 0.0;

  double bin_hz() const { return double(kSampleRate) / double(kResponseFft); }
  /// The -3 dB band closes on both sides inside (0, Nyquist).
  bool band_pass() const { return low_bin > 0 && high_bin < kResponseFft / 2; }
};

/// Magnitude response of one impulse response, its peak and the contiguous
/// run of bins within 3 dB of the peak.
inline FilterResponse analyze_filter(std::span<const double> taps) {
  if (taps.empty() || taps.size() > kResponseFft) {
    throw Error(ErrorCode::invalid_argument, "filter length " + std::to_string(taps.size()) + " not in [1, " +
                                                 std::to_string(kResponseFft) + "]");
  }
  RealFft fft(kResponseFft);
  std::fill(fft.input(), fft.input() + kResponseFft, 0.0);
  std::copy(taps.begin(), taps.end(), fft.input());
  FilterResponse r;
  r.spectrum.resize(kResponseFft / 2 + 1);
  fft.magnitude(r.spectrum);
  const std::size_t peak = argmax(r.spectrum);
  const double cut = r.spectrum[peak] / std::sqrt(2.0);
  std::size_t lo = peak, hi = peak;
  while (lo > 0 && r.spectrum[lo - 1] >= cut) --lo;
  while (hi + 1 < r.spectrum.size() && r.spectrum[hi + 1] >= cut) ++hi;
  r.center_hz = double(peak) * r.bin_hz();
  r.low_bin = lo;
  r.high_bin = hi;
  r.bandwidth_hz = double(hi - lo) * r.bin_hz();
  return r;
}

/// Responses of every Conv1 filter of scale `scale` (1-based), stably sorted
/// by center frequency.
inline std::vector<FilterResponse> filter_response(const Checkpoint& ckpt, std::size_t scale) {
  const std::string name = "scale" + std::to_string(scale) + ".conv1.weight";
  const auto* rec = ckpt.find(name);
  if (!rec) throw Error(ErrorCode::invalid_argument, "checkpoint has no scale " + std::to_string(scale) + " (" + name + ")");
  if (rec->shape.size() != 3 || rec->shape[1] != 1) {
    throw Error(ErrorCode::shape_mismatch, name + " has shape " + to_string(rec->shape) + ", expected (n, 1, k)");
  }
  const std::size_t n = rec->shape[0], k = rec->shape[2];
  std::vector<FilterResponse> out;
  for (std::size_t f = 0; f < n; ++f) {
    std::vector<double> taps(rec->values.begin() + static_cast<std::ptrdiff_t>(f * k),
                             rec->values.begin() + static_cast<std::ptrdiff_t>((f + 1) * k));
    auto r = analyze_filter(taps);
    r.scale = scale;
    r.filter = f;
    out.push_back(std::move(r));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const FilterResponse& a, const FilterResponse& b) { return a.center_hz < b.center_hz; });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].rank = i;
  return out;
}

/// All scales present in the checkpoint, scale by scale.
inline std::vector<FilterResponse> filter_responses(const Checkpoint& ckpt) {
  std::vector<FilterResponse> out;
  for (std::size_t s = 1; ckpt.find("scale" + std::to_string(s) + ".conv1.weight"); ++s) {
    auto part = filter_response(ckpt, s);
    out.insert(out.end(), part.begin(), part.end());
  }
  if (out.empty()) throw Error(ErrorCode::invalid_argument, "checkpoint has no Conv1 filters");
  return out;
}

inline std::string filter_csv(const std::vector<FilterResponse>& rs) {
  std::string out = "scale,rank,filter,center_hz,bandwidth_hz,band_pass\n";
  for (const auto& r : rs) {
    out += std::to_string(r.scale) + "," + std::to_string(r.rank) + "," + std::to_string(r.filter) + "," +
           format_number(r.center_hz) + "," + format_number(r.bandwidth_hz) + "," + (r.band_pass() ? "1" : "0") + "\n";
  }
  return out;
}

inline std::string spectra_csv(const std::vector<FilterResponse>& rs) {
  std::string out = "scale,filter,bin,hz,magnitude\n";
  for (const auto& r : rs) {
    for (std::size_t b = 0; b < r.spectrum.size(); ++b) {
      out += std::to_string(r.scale) + "," + std::to_string(r.filter) + "," + std::to_string(b) + "," +
             format_number(double(b) * r.bin_hz()) + "," + format_number(r.spectrum[b]) + "\n";
    }
  }
  return out;
}

}  // namespace wavemsnet
