#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <fftw3.h>

#include "wavemsnet/config.hpp"
#include "wavemsnet/tensor.hpp"

namespace wavemsnet {

inline constexpr unsigned kSampleRate = 44100;
/// 1.5 s at 44.1 kHz.
inline constexpr std::size_t kWindowLength = 66150;

struct AudioClip {
  std::vector<float> samples;
  unsigned sample_rate = kSampleRate;
  std::size_t label = 0;
  int fold = 0;
  std::string id;
};

// ---------------------------------------------------------------------------
// WAV

namespace detail {

inline std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return std::uint32_t(b[at]) | std::uint32_t(b[at + 1]) << 8 | std::uint32_t(b[at + 2]) << 16 |
         std::uint32_t(b[at + 3]) << 24;
}

inline std::uint16_t read_u16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | b[at + 1] << 8);
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline bool tag_is(std::span<const std::uint8_t> b, std::size_t at, const char* tag) {
  return std::equal(tag, tag + 4, b.begin() + static_cast<std::ptrdiff_t>(at),
                    [](char c, std::uint8_t u) { return static_cast<std::uint8_t>(c) == u; });
}

}  // namespace detail

/// Decodes a RIFF/WAVE file holding 16-bit PCM at 44.1 kHz, mono or stereo.
/// Samples are scaled by 1/32768; stereo is averaged to mono.
inline AudioClip decode_wav(std::span<const std::uint8_t> bytes) {
  using detail::read_u16;
  using detail::read_u32;
  if (bytes.size() < 12 || !detail::tag_is(bytes, 0, "RIFF") || !detail::tag_is(bytes, 8, "WAVE")) {
    throw Error(ErrorCode::format, "wav: missing RIFF/WAVE header");
  }
  bool have_fmt = false;
  std::uint16_t channels = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t chunk = read_u32(bytes, pos + 4);
    const std::size_t body = pos + 8;
    if (body + chunk > bytes.size()) {
      throw Error(ErrorCode::format, "wav: truncated chunk '" +
                                         std::string(reinterpret_cast<const char*>(&bytes[pos]), 4) + "' (" +
                                         std::to_string(chunk) + " bytes declared, " +
                                         std::to_string(bytes.size() - body) + " present)");
    }
    if (detail::tag_is(bytes, pos, "fmt ")) {
      if (chunk < 16) throw Error(ErrorCode::format, "wav: fmt chunk shorter than 16 bytes");
      const std::uint16_t audio_format = read_u16(bytes, body);
      channels = read_u16(bytes, body + 2);
      const std::uint32_t rate = read_u32(bytes, body + 4);
      const std::uint16_t bits = read_u16(bytes, body + 14);
      if (audio_format != 1) {
        throw Error(ErrorCode::format, "wav: audio format " + std::to_string(audio_format) + " is not PCM (1)");
      }
      if (bits != 16) throw Error(ErrorCode::format, "wav: " + std::to_string(bits) + "-bit samples, need 16");
      if (rate != kSampleRate) {
        throw Error(ErrorCode::format, "wav: sample rate " + std::to_string(rate) + " Hz, need 44100");
      }
      if (channels != 1 && channels != 2) {
        throw Error(ErrorCode::format, "wav: " + std::to_string(channels) + " channels, need 1 or 2");
      }
      have_fmt = true;
    } else if (detail::tag_is(bytes, pos, "data")) {
      if (!have_fmt) throw Error(ErrorCode::format, "wav: data chunk before fmt chunk");
      const std::size_t frame = 2u * channels;
      if (chunk % frame != 0) {
        throw Error(ErrorCode::format, "wav: data size " + std::to_string(chunk) + " not a multiple of frame size");
      }
      AudioClip clip;
      const std::size_t frames = chunk / frame;
      clip.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        if (channels == 1) {
          clip.samples[i] = static_cast<float>(static_cast<std::int16_t>(read_u16(bytes, body + 2 * i)) / 32768.0);
        } else {
          const int l = static_cast<std::int16_t>(read_u16(bytes, body + 4 * i));
          const int r = static_cast<std::int16_t>(read_u16(bytes, body + 4 * i + 2));
          clip.samples[i] = static_cast<float>((l + r) / 65536.0);
        }
      }
      return clip;
    }
    pos = body + chunk + (chunk & 1u);
  }
  throw Error(ErrorCode::format, have_fmt ? "wav: no data chunk" : "wav: no fmt chunk");
}

/// 16-bit PCM, 44.1 kHz. Values are rounded to the nearest 1/32768 step and
/// clamped to [-32768, 32767]. Channel-interleaved input when channels == 2.
inline std::vector<std::uint8_t> encode_wav(std::span<const float> samples, std::uint16_t channels = 1) {
  if (channels != 1 && channels != 2) throw Error(ErrorCode::invalid_argument, "wav: 1 or 2 channels");
  if (samples.size() % channels != 0) {
    throw Error(ErrorCode::invalid_argument, "wav: sample count not a multiple of channel count");
  }
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  detail::put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, channels);
  detail::put_u32(out, kSampleRate);
  detail::put_u32(out, kSampleRate * 2u * channels);
  detail::put_u16(out, static_cast<std::uint16_t>(2 * channels));
  detail::put_u16(out, 16);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  detail::put_u32(out, data_bytes);
  for (float s : samples) {
    const long q = std::clamp(std::lround(static_cast<double>(s) * 32768.0), -32768L, 32767L);
    detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline AudioClip read_wav_file(const std::filesystem::path& path) {
  try {
    return decode_wav(read_file_bytes(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Windows

/// Copies `length` samples starting at `start`; positions past the end of the
/// clip are zero.
inline std::vector<float> crop_window(std::span<const float> samples, std::size_t start,
                                      std::size_t length = kWindowLength) {
  std::vector<float> window(length, 0.0f);
  if (start < samples.size()) {
    const std::size_t n = std::min(length, samples.size() - start);
    std::copy_n(samples.begin() + static_cast<std::ptrdiff_t>(start), n, window.begin());
  }
  return window;
}

/// Random window: the start is uniform on [0, size - length]; short clips
/// always start at 0 and are zero padded.
template <typename Rng>
std::vector<float> random_crop(std::span<const float> samples, Rng& rng, std::size_t length = kWindowLength) {
  std::size_t start = 0;
  if (samples.size() > length) {
    std::uniform_int_distribution<std::size_t> pick(0, samples.size() - length);
    start = pick(rng);
  }
  return crop_window(samples, start, length);
}

// ---------------------------------------------------------------------------
// Spectral features

struct LogMelConfig {
  std::size_t n_mels = 96;
  std::size_t fft_size = 1024;
  std::size_t hop = 150;
  double f_min = 0.0;
  double f_max = 22050.0;
  double log_eps = 1e-6;
  std::size_t frames_out = 441;
  unsigned sample_rate = kSampleRate;

  std::size_t n_bins() const { return fft_size / 2 + 1; }

  void validate() const {
    if (fft_size < 2 || (fft_size & (fft_size - 1)) != 0) {
      throw Error(ErrorCode::config, "logmel: fft_size " + std::to_string(fft_size) + " is not a power of two");
    }
    if (n_mels == 0 || hop == 0 || frames_out == 0) {
      throw Error(ErrorCode::config, "logmel: n_mels, hop and frames_out must be positive");
    }
    if (!(f_min >= 0.0 && f_max > f_min && f_max <= sample_rate / 2.0)) {
      throw Error(ErrorCode::config, "logmel: mel range must satisfy 0 <= f_min < f_max <= sample_rate/2");
    }
  }
};

inline KeyValues logmel_key_values(const LogMelConfig& c) {
  KeyValues kv;
  kv.set_number("logmel.n_mels", c.n_mels);
  kv.set_number("logmel.fft_size", c.fft_size);
  kv.set_number("logmel.hop", c.hop);
  kv.set("logmel.window", "hann");
  kv.set_number("logmel.f_min", c.f_min);
  kv.set_number("logmel.f_max", c.f_max);
  kv.set_number("logmel.log_eps", c.log_eps);
  kv.set_number("logmel.frames_out", c.frames_out);
  kv.set("logmel.normalize", "per_window_standardize");
  return kv;
}

inline LogMelConfig logmel_config_from(const KeyValues& kv) {
  LogMelConfig c;
  c.n_mels = kv.number<std::size_t>("logmel.n_mels", c.n_mels);
  c.fft_size = kv.number<std::size_t>("logmel.fft_size", c.fft_size);
  c.hop = kv.number<std::size_t>("logmel.hop", c.hop);
  c.f_min = kv.number<double>("logmel.f_min", c.f_min);
  c.f_max = kv.number<double>("logmel.f_max", c.f_max);
  c.log_eps = kv.number<double>("logmel.log_eps", c.log_eps);
  c.frames_out = kv.number<std::size_t>("logmel.frames_out", c.frames_out);
  if (auto w = kv.get("logmel.window"); w && *w != "hann") {
    throw Error(ErrorCode::config, "logmel.window '" + *w + "' not supported (hann only)");
  }
  c.validate();
  return c;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Real-input FFT of a fixed size, magnitude output for bins 0..n/2.
class RealFft {
 public:
  explicit RealFft(std::size_t n)
      : n_(n),
        in_(fftw_alloc_real(n), fftw_free),
        out_(fftw_alloc_complex(n / 2 + 1), [](fftw_complex* p) { fftw_free(p); }) {
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_.get(), out_.get(), FFTW_ESTIMATE);
    if (!plan_) throw Error(ErrorCode::state, "fftw: plan creation failed for size " + std::to_string(n));
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() { fftw_destroy_plan(plan_); }

  std::size_t size() const { return n_; }
  double* input() { return in_.get(); }

  /// Transforms input() and writes |X[k]| for k = 0..n/2.
  void magnitude(std::span<double> out) {
    fftw_execute(plan_);
    for (std::size_t k = 0; k <= n_ / 2; ++k) out[k] = std::hypot(out_.get()[k][0], out_.get()[k][1]);
  }

 private:
  std::size_t n_;
  std::unique_ptr<double, decltype(&fftw_free)> in_;
  std::unique_ptr<fftw_complex, void (*)(fftw_complex*)> out_;
  fftw_plan plan_ = nullptr;
};

/// Periodic Hann window.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(n));
  return w;
}

namespace detail {

// numpy-style "reflect" indexing (edge sample not repeated), folded as often
// as needed for inputs shorter than the pad.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

}  // namespace detail

/// Magnitude STFT [n_bins, frames]: centered frames (reflect padding of
/// fft_size/2 at both ends), periodic Hann window, one frame every `hop`
/// samples, truncated to the first frames_out frames.
inline Tensor<double> stft_magnitude(std::span<const float> x, const LogMelConfig& cfg, RealFft* fft = nullptr) {
  cfg.validate();
  if (x.empty()) throw Error(ErrorCode::invalid_argument, "stft: empty input");
  std::unique_ptr<RealFft> owned;
  if (!fft || fft->size() != cfg.fft_size) {
    owned = std::make_unique<RealFft>(cfg.fft_size);
    fft = owned.get();
  }
  const std::size_t bins = cfg.n_bins();
  const std::size_t frames = std::min(x.size() / cfg.hop + 1, cfg.frames_out);
  const auto window = hann_window(cfg.fft_size);
  const auto half = static_cast<std::ptrdiff_t>(cfg.fft_size / 2);
  Tensor<double> mag({bins, frames});
  std::vector<double> column(bins);
  for (std::size_t f = 0; f < frames; ++f) {
    const auto start = static_cast<std::ptrdiff_t>(f * cfg.hop) - half;
    double* in = fft->input();
    for (std::size_t i = 0; i < cfg.fft_size; ++i) {
      const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(i);
      const bool inside = pos >= 0 && pos < static_cast<std::ptrdiff_t>(x.size());
      const float v = inside ? x[static_cast<std::size_t>(pos)] : x[detail::reflect_index(pos, x.size())];
      in[i] = window[i] * v;
    }
    fft->magnitude(column);
    for (std::size_t k = 0; k < bins; ++k) mag[k * frames + f] = column[k];
  }
  return mag;
}

/// Triangular filters [n_mels, n_bins] whose peaks are equally spaced on the
/// mel scale m(f) = 2595 log10(1 + f/700) between f_min and f_max.
inline Tensor<double> mel_filterbank(const LogMelConfig& cfg) {
  cfg.validate();
  const std::size_t bins = cfg.n_bins();
  const double lo = hz_to_mel(cfg.f_min), hi = hz_to_mel(cfg.f_max);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * double(i) / double(cfg.n_mels + 1));
  }
  const double bin_hz = double(cfg.sample_rate) / double(cfg.fft_size);
  Tensor<double> bank({cfg.n_mels, bins});
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double left = edges[m], peak = edges[m + 1], right = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = double(k) * bin_hz;
      double v = 0.0;
      if (f > left && f <= peak) {
        v = (f - left) / (peak - left);
      } else if (f > peak && f < right) {
        v = (right - f) / (right - peak);
      }
      bank[m * bins + k] = v;
    }
  }
  return bank;
}

/// Standardized log-mel map [n_mels, frames_out] of one window.
///
/// Holds the FFT plan, window and filterbank so repeated calls are cheap.
/// Not thread safe; use one extractor per thread.
class LogMelExtractor {
 public:
  explicit LogMelExtractor(LogMelConfig cfg = {})
      : cfg_(cfg), fft_((cfg_.validate(), cfg_.fft_size)), bank_(mel_filterbank(cfg_)) {}

  const LogMelConfig& config() const { return cfg_; }

  /// log(filterbank * |STFT| + log_eps), then shifted and scaled to zero mean
  /// and unit variance over the whole map. A constant map becomes all zeros.
  Tensor<double> operator()(std::span<const float> window) {
    Tensor<double> mag = stft_magnitude(window, cfg_, &fft_);
    const std::size_t frames = mag.dim(1);
    if (frames != cfg_.frames_out) {
      throw Error(ErrorCode::shape_mismatch, "logmel: window of " + std::to_string(window.size()) +
                                                 " samples gives " + std::to_string(frames) + " frames, need " +
                                                 std::to_string(cfg_.frames_out));
    }
    const std::size_t bins = cfg_.n_bins();
    Tensor<double> out({cfg_.n_mels, frames});
    ConstMatrixMapD bank(bank_.raw(), cfg_.n_mels, bins);
    ConstMatrixMapD spec(mag.raw(), bins, frames);
    MatrixMapD(out.raw(), cfg_.n_mels, frames).noalias() = bank * spec;
    double sum = 0.0;
    for (auto& v : out.data()) {
      v = std::log(v + cfg_.log_eps);
      sum += v;
    }
    const double mean = sum / double(out.size());
    double sq = 0.0;
    for (double v : out.data()) sq += (v - mean) * (v - mean);
    const double var = sq / double(out.size());
    // Below this the map is constant up to rounding.
    const double scale = var > 1e-20 ? 1.0 / std::sqrt(var) : 0.0;
    for (auto& v : out.data()) v = (v - mean) * scale;
    return out;
  }

 private:
  using RowMatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMatrixMapD = Eigen::Map<const RowMatrixD>;
  using MatrixMapD = Eigen::Map<RowMatrixD>;

  LogMelConfig cfg_;
  RealFft fft_;
  Tensor<double> bank_;
};

inline Tensor<double> logmel(std::span<const float> window, const LogMelConfig& cfg = {}) {
  LogMelExtractor extractor(cfg);
  return extractor(window);
}

}  // namespace wavemsnet
