#include <cmath>
#include <complex>
#include <random>

#include <gtest/gtest.h>

#include "wavemsnet/eval.hpp"

using namespace wavemsnet;

namespace {

ModelConfig tiny_config(std::size_t classes = 3) {
  ModelConfig c;
  c.input_length = 1200;
  c.scales = {{5, 1, 2, 100}, {9, 2, 2, 50}, {11, 4, 2, 25}};
  c.map_rows = 6;
  c.map_frames = 12;
  c.conv2_size = 3;
  c.backend = {{3, 3, 2}, {4, 2, 2}};
  c.fc_width = 8;
  c.n_classes = classes;
  return c;
}

LogMelConfig tiny_logmel() {
  LogMelConfig c;
  c.n_mels = 6;
  c.fft_size = 256;
  c.hop = 100;
  c.frames_out = 12;
  return c;
}

std::vector<AudioClip> labelled_clips(std::size_t n, std::size_t classes, std::size_t length = 3000) {
  std::vector<AudioClip> clips;
  std::mt19937_64 rng(5);
  std::normal_distribution<float> g(0.0f, 0.2f);
  for (std::size_t i = 0; i < n; ++i) {
    AudioClip c;
    c.label = i % classes;
    char id[16];
    std::snprintf(id, sizeof(id), "clip%04zu", n - i);  // reverse order on purpose
    c.id = id;
    c.samples.resize(length);
    for (auto& v : c.samples) v = g(rng);
    clips.push_back(std::move(c));
  }
  return clips;
}

// Windowed sinusoid at `hz`, sampled at 44.1 kHz.
std::vector<double> windowed_tone(double hz, std::size_t taps) {
  std::vector<double> w(taps);
  for (std::size_t i = 0; i < taps; ++i) {
    const double hann = 0.5 - 0.5 * std::cos(2 * M_PI * double(i) / double(taps - 1));
    w[i] = hann * std::sin(2 * M_PI * hz * double(i) / 44100.0);
  }
  return w;
}

}  // namespace

TEST(Voting, WindowStarts) {
  VoteConfig cfg;
  const auto s = window_starts(220500, cfg);
  ASSERT_EQ(s.size(), 10u);
  EXPECT_EQ(s.front(), 0u);
  EXPECT_EQ(s.back(), 220500u - 66150u);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_GT(s[i], s[i - 1]);
  EXPECT_EQ(window_starts(66150, cfg), (std::vector<std::size_t>{0}));
  EXPECT_EQ(window_starts(1000, cfg), (std::vector<std::size_t>{0}));
  cfg.n_windows = 1;
  EXPECT_EQ(window_starts(220500, cfg), (std::vector<std::size_t>{0}));
  cfg.n_windows = 0;
  EXPECT_THROW(window_starts(220500, cfg), Error);
}

TEST(Voting, Examples) {
  const auto one = vote({{0.1, 0.7, 0.2}});
  EXPECT_EQ(one.predicted, 1u);
  EXPECT_EQ(one.probs, (std::vector<double>{0.1, 0.7, 0.2}));
  const auto two = vote({{0.6, 0.4}, {0.2, 0.8}});
  EXPECT_NEAR(two.probs[0], 0.4, 1e-15);
  EXPECT_NEAR(two.probs[1], 0.6, 1e-15);
  EXPECT_EQ(two.predicted, 1u);
  EXPECT_EQ(vote({{0.5, 0.5}}).predicted, 0u);
  const auto same = vote({{0.3, 0.7}, {0.3, 0.7}, {0.3, 0.7}});
  EXPECT_NEAR(same.probs[1], 0.7, 1e-15);
  EXPECT_THROW(vote({}), Error);
  EXPECT_THROW(vote({{0.5, 0.5}, {1.0}}), Error);
}

TEST(Voting, PermutationInvariant) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::vector<double>> p(7);
  for (auto& row : p) {
    std::vector<double> z(5);
    for (auto& v : z) v = u(rng) * 4;
    row = softmax_row(z);
  }
  const auto a = vote(p);
  std::reverse(p.begin(), p.end());
  const auto b = vote(p);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(a.probs[c], b.probs[c], 1e-15);
  EXPECT_EQ(a.predicted, b.predicted);
}

TEST(Voting, ConstantClipMatchesSingleWindow) {
  WaveMsNet<double> m(tiny_config(), 4);
  AudioClip clip;
  clip.samples.assign(5000, 0.25f);
  LogMelExtractor ex(tiny_logmel());
  VoteConfig many{6, 1200}, single{1, 1200};
  const auto a = vote_predict(m, InputKind::fusion, clip, many, ex);
  const auto b = vote_predict(m, InputKind::fusion, clip, single, ex);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a.probs[c], b.probs[c], 1e-12);
  double sum = 0;
  for (double p : a.probs) sum += p;
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(Evaluate, PerfectPredictor) {
  const auto clips = labelled_clips(20, 4);
  const auto rep = evaluate_clips(clips, 4, [](const AudioClip& c) {
    VoteResult r;
    r.probs.assign(4, 0.0);
    r.probs[c.label] = 1.0;
    r.predicted = c.label;
    return r;
  });
  EXPECT_EQ(rep.accuracy, 1.0);
  EXPECT_EQ(rep.correct, 20u);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t p = 0; p < 4; ++p) EXPECT_EQ(rep.confusion[t][p], t == p ? 5u : 0u);
  for (std::size_t i = 1; i < rep.clips.size(); ++i) EXPECT_LT(rep.clips[i - 1].id, rep.clips[i].id);
}

TEST(Evaluate, UniformRandomPredictor) {
  const auto clips = labelled_clips(400, 4, 10);
  std::mt19937_64 rng(2024);
  const auto rep = evaluate_clips(clips, 4, [&](const AudioClip&) {
    VoteResult r;
    r.probs.assign(4, 0.25);
    r.predicted = std::uniform_int_distribution<std::size_t>(0, 3)(rng);
    return r;
  });
  EXPECT_NEAR(rep.accuracy, 0.25, 0.1);
  std::size_t total = 0, trace = 0;
  for (std::size_t t = 0; t < 4; ++t) {
    std::size_t row = 0;
    for (std::size_t p = 0; p < 4; ++p) row += rep.confusion[t][p];
    EXPECT_EQ(row, 100u);
    total += row;
    trace += rep.confusion[t][t];
  }
  EXPECT_EQ(total, 400u);
  EXPECT_EQ(double(trace) / double(total), rep.accuracy);
}

TEST(Evaluate, Errors) {
  auto any = [](const AudioClip&) { return VoteResult{0, {1.0, 0.0}}; };
  EXPECT_THROW(evaluate_clips({}, 2, any), Error);
  auto clips = labelled_clips(2, 2);
  clips[0].label = 5;
  EXPECT_THROW(evaluate_clips(clips, 2, any), Error);
}

TEST(Evaluate, CrossValidationMean) {
  const std::vector<double> acc{0.8, 0.9, 0.7, 0.85, 0.75};
  EXPECT_NEAR(cross_validation_mean(acc), 0.8, 1e-15);
  EXPECT_THROW(cross_validation_mean(std::vector<double>{}), Error);
}

TEST(Evaluate, ModelEvaluationIsPure) {
  WaveMsNet<float> m(tiny_config(), 6);
  const auto clips = labelled_clips(6, 3);
  const VoteConfig cfg{3, 1200};
  const auto a = evaluate_fold(m, InputKind::fusion, clips, cfg, tiny_logmel());
  const auto b = evaluate_fold(m, InputKind::fusion, clips, cfg, tiny_logmel());
  EXPECT_EQ(clip_log_csv(a), clip_log_csv(b));
  EXPECT_EQ(confusion_csv(a), confusion_csv(b));
  const auto csv = confusion_csv(a);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "truth,pred0,pred1,pred2");
}

TEST(Evaluate, EnsembleOfTwoModels) {
  WaveMsNet<float> wave(tiny_config(), 6), mel(tiny_config(), 7);
  const VoteConfig cfg{2, 1200};
  auto pa = model_predictor(wave, InputKind::waveform, cfg, tiny_logmel());
  auto pb = model_predictor(mel, InputKind::logmel, cfg, tiny_logmel());
  const auto both = ensemble_predictor(pa, pb);
  const auto clip = labelled_clips(1, 3)[0];
  const auto a = pa(clip), b = pb(clip), e = both(clip);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(e.probs[c], 0.5 * (a.probs[c] + b.probs[c]), 1e-12);
  EXPECT_EQ(e.predicted, argmax(e.probs));
}

TEST(Filters, UnitImpulseIsFlat) {
  const std::vector<double> delta{1.0};
  const auto r = analyze_filter(delta);
  ASSERT_EQ(r.spectrum.size(), 1025u);
  for (double v : r.spectrum) EXPECT_NEAR(v, 1.0, 1e-12);
  EXPECT_EQ(r.low_bin, 0u);
  EXPECT_EQ(r.high_bin, 1024u);
  EXPECT_NEAR(r.bandwidth_hz, 22050.0, 1e-9);
  EXPECT_FALSE(r.band_pass());
}

TEST(Filters, WindowedToneCenter) {
  const auto taps = windowed_tone(2000.0, 101);
  const auto r = analyze_filter(taps);
  const double bin = 44100.0 / 2048.0;
  EXPECT_LE(std::abs(r.center_hz - 2000.0), bin);
  EXPECT_TRUE(r.band_pass());
  EXPECT_GT(r.bandwidth_hz, 0.0);
  // direct DFT at the reported peak bin
  const std::size_t k = static_cast<std::size_t>(std::lround(r.center_hz / bin));
  std::complex<double> acc = 0;
  for (std::size_t i = 0; i < taps.size(); ++i) acc += taps[i] * std::polar(1.0, -2 * M_PI * double(k * i) / 2048.0);
  EXPECT_NEAR(r.spectrum[k], std::abs(acc), 1e-9);
  EXPECT_THROW(analyze_filter(std::vector<double>{}), Error);
}

TEST(Filters, CheckpointAnalysis) {
  WaveMsNet<float> m(ModelConfig::wavemsnet(10), 1);
  const auto ckpt = capture(m, static_cast<SgdState<float>*>(nullptr), {});
  const auto all = filter_responses(ckpt);
  EXPECT_EQ(all.size(), 96u);
  for (std::size_t s = 1; s <= 3; ++s) {
    const auto rs = filter_response(ckpt, s);
    ASSERT_EQ(rs.size(), 32u);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      EXPECT_EQ(rs[i].rank, i);
      EXPECT_EQ(rs[i].scale, s);
      if (i) EXPECT_LE(rs[i - 1].center_hz, rs[i].center_hz);
      EXPECT_GE(rs[i].center_hz, 0.0);
      EXPECT_LE(rs[i].center_hz, 22050.0);
      for (double v : rs[i].spectrum) ASSERT_GE(v, 0.0);
    }
  }
  const auto csv = filter_csv(all);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 97);
  EXPECT_EQ(csv, filter_csv(filter_responses(ckpt)));
  EXPECT_EQ(spectra_csv(all), spectra_csv(filter_responses(ckpt)));
  EXPECT_THROW(filter_response(ckpt, 4), Error);
}

TEST(Filters, PlantedFilterFound) {
  WaveMsNet<float> m(ModelConfig::wavemsnet(10), 1);
  auto w = m.param("scale3.conv1.weight");
  const auto taps = windowed_tone(2000.0, 101);
  for (std::size_t i = 0; i < 101; ++i) w[5 * 101 + i] = static_cast<float>(taps[i]);
  const auto rs = filter_response(capture(m, static_cast<SgdState<float>*>(nullptr), {}), 3);
  const auto it = std::find_if(rs.begin(), rs.end(), [](const FilterResponse& r) { return r.filter == 5; });
  ASSERT_NE(it, rs.end());
  EXPECT_LE(std::abs(it->center_hz - 2000.0), 44100.0 / 2048.0);
}
