#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "wavemsnet/layers.hpp"

using namespace wavemsnet;
using gradcheck::random_tensor;

namespace {

std::vector<double> values(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Padding, CeilLengthRule) {
  EXPECT_EQ(same_padding(66150, 11, 1), (Padding1d{5, 5}));
  EXPECT_EQ(same_padding(66150, 51, 5), (Padding1d{23, 23}));
  EXPECT_EQ(same_padding(66150, 101, 10), (Padding1d{45, 46}));
  EXPECT_EQ(conv_output_length(66150, 101, 10, 91), 6615u);
  EXPECT_EQ(conv_output_length(66150, 51, 5, 46), 13230u);
}

TEST(Conv1d, UnitKernelIsIdentity) {
  Tape<double> tape;
  Tensor<double> x({1, 1, 5}, {1, -2, 3, 0.5, 4});
  auto y = conv1d(tape, x, Tensor<double>({1, 1, 1}, 1.0), Tensor<double>({1}), 1, {});
  EXPECT_EQ(values(y), values(x));
}

TEST(Conv1d, TwoTapSum) {
  Tape<double> tape;
  auto y = conv1d(tape, Tensor<double>({1, 1, 4}, {1, 2, 3, 4}), Tensor<double>({1, 1, 2}, 1.0),
                  Tensor<double>({1}), 1, {});
  EXPECT_EQ(values(y), (std::vector<double>{3, 5, 7}));
}

TEST(Conv1d, LargestScaleLength) {
  Tape<float> tape;
  Tensor<float> x({1, 1, 66150});
  auto y = conv1d(tape, x, Tensor<float>({1, 1, 101}), Tensor<float>({1}), 10, Padding1d{45, 46});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 6615}));
}

TEST(Conv1d, KernelLongerThanInput) {
  Tape<double> tape;
  EXPECT_THROW(conv1d(tape, Tensor<double>({1, 1, 3}), Tensor<double>({1, 1, 5}), Tensor<double>({1}), 1, {}),
               Error);
}

TEST(Conv1d, MatchesNestedLoops) {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> d(1, 4), klen(1, 7), len(7, 30), st(1, 3), pad(0, 3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = d(rng), C = d(rng), O = d(rng), K = klen(rng), L = len(rng), s = st(rng);
    const Padding1d p{pad(rng), pad(rng)};
    auto x = random_tensor({B, C, L}, rng), w = random_tensor({O, C, K}, rng), b = random_tensor({O}, rng);
    Tape<double> tape;
    const auto y = conv1d(tape, x, w, b, s, p);
    EXPECT_LE(max_abs_diff(y, oracle::conv1d(x, w, b, s, p.left, p.right)), 1e-6) << "trial " << trial;
  }
}

TEST(Conv1d, Gradients) {
  std::mt19937_64 rng(4);
  for (auto [s, p] : {std::pair<std::size_t, Padding1d>{1, {1, 1}}, {2, {1, 2}}, {3, {0, 0}}}) {
    auto x = random_tensor({2, 2, 9}, rng), w = random_tensor({3, 2, 3}, rng), b = random_tensor({3}, rng);
    Tape<double> probe;
    auto r = random_tensor(conv1d(probe, x, w, b, s, p).shape(), rng);
    const auto rep = gradcheck::check(
        {x, w, b}, [&](Tape<double>& t) { return sum(t, mul(t, conv1d(t, x, w, b, s, p), r)); });
    EXPECT_LE(rep.worst, 1e-4);
  }
}

TEST(Conv2d, UnitKernelIsIdentity) {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  auto x = random_tensor({1, 1, 3, 4}, rng);
  EXPECT_EQ(values(conv2d(tape, x, Tensor<double>({1, 1, 1, 1}, 1.0), Tensor<double>({1}), {})), values(x));
}

TEST(Conv2d, AllOnesKernel) {
  Tape<double> tape;
  auto y = conv2d(tape, Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}), Tensor<double>({1, 1, 2, 2}, 1.0),
                  Tensor<double>({1}), {});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 10);
}

TEST(Conv2d, PaddedThreeByThreeKeepsSize) {
  Tape<float> tape;
  auto y = conv2d(tape, Tensor<float>({1, 1, 96, 441}), Tensor<float>({64, 1, 3, 3}), Tensor<float>({64}),
                  {1, 1, 1, 1});
  EXPECT_EQ(y.shape(), (Shape{1, 64, 96, 441}));
  auto pooled = maxpool(tape, y, {3, 11});
  EXPECT_EQ(pooled.shape(), (Shape{1, 64, 32, 40}));
}

TEST(Conv2d, MatchesNestedLoops) {
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<std::size_t> d(1, 3), k(1, 3), len(3, 9), st(1, 2), pad(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = d(rng), C = d(rng), O = d(rng), KH = k(rng), KW = k(rng), H = len(rng), W = len(rng);
    const Conv2dGeometry g{st(rng), st(rng), pad(rng), pad(rng)};
    auto x = random_tensor({B, C, H, W}, rng), w = random_tensor({O, C, KH, KW}, rng), b = random_tensor({O}, rng);
    Tape<double> tape;
    const auto y = conv2d(tape, x, w, b, g);
    EXPECT_LE(max_abs_diff(y, oracle::conv2d(x, w, b, g.stride_h, g.stride_w, g.pad_h, g.pad_w)), 1e-6)
        << "trial " << trial;
  }
}

TEST(Conv2d, Gradients) {
  std::mt19937_64 rng(8);
  auto x = random_tensor({2, 2, 4, 5}, rng), w = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2}, rng);
  Tape<double> probe;
  auto r = random_tensor(conv2d(probe, x, w, b, {1, 2, 1, 1}).shape(), rng);
  const auto rep = gradcheck::check(
      {x, w, b}, [&](Tape<double>& t) { return sum(t, mul(t, conv2d(t, x, w, b, {1, 2, 1, 1}), r)); });
  EXPECT_LE(rep.worst, 1e-4);
}

TEST(MaxPool, SizeOneIsIdentity) {
  Tape<double> tape;
  Tensor<double> x({1, 2, 3}, {1, 5, 2, -1, 0, 3});
  EXPECT_EQ(values(maxpool(tape, x, {1})), values(x));
}

TEST(MaxPool, PairsOfFour) {
  Tape<double> tape;
  EXPECT_EQ(values(maxpool(tape, Tensor<double>({1, 1, 4}, {1, 3, 2, 8}), {2})), (std::vector<double>{3, 8}));
}

TEST(MaxPool, TableSizes) {
  Tape<float> tape;
  EXPECT_EQ(maxpool(tape, Tensor<float>({1, 32, 13230}), {30}).shape(), (Shape{1, 32, 441}));
  EXPECT_EQ(maxpool(tape, Tensor<float>({1, 1, 96, 441}), {3, 11}).shape(), (Shape{1, 1, 32, 40}));
}

TEST(MaxPool, SizeZeroRejected) {
  Tape<double> tape;
  EXPECT_THROW(maxpool(tape, Tensor<double>({1, 1, 4}), {0}), Error);
}

TEST(MaxPool, MatchesNestedLoops) {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<std::size_t> d(1, 3), sz(1, 4), len(4, 20);
  for (int trial = 0; trial < 100; ++trial) {
    Tape<double> tape;
    auto x1 = random_tensor({d(rng), d(rng), len(rng)}, rng);
    const std::size_t s = std::min(sz(rng), x1.dim(2));
    EXPECT_EQ(values(maxpool(tape, x1, {s})), values(oracle::maxpool1d(x1, s)));
    auto x2 = random_tensor({d(rng), d(rng), len(rng), len(rng)}, rng);
    const std::size_t a = sz(rng), b = sz(rng);
    EXPECT_EQ(values(maxpool(tape, x2, {a, b})), values(oracle::maxpool2d(x2, a, b)));
  }
}

TEST(MaxPool, ComposesMultiplicatively) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({2, 3, 60}, rng);
  Tape<double> tape;
  EXPECT_EQ(values(maxpool(tape, maxpool(tape, x, {3}), {4})), values(maxpool(tape, x, {12})));
}

TEST(MaxPool, TiesRouteToFirst) {
  Tensor<double> x({1, 1, 4}, {2, 2, 1, 1});
  x.set_requires_grad(true);
  Tape<double> tape;
  auto l = sum(tape, maxpool(tape, x, {2}));
  tape.backward(l);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 1, 0}));
}

TEST(MaxPool, Gradients) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 2, 6, 7}, rng);
  auto r = random_tensor({2, 2, 3, 2}, rng);
  const auto rep = gradcheck::check({x}, [&](Tape<double>& t) { return sum(t, mul(t, maxpool(t, x, {2, 3}), r)); });
  EXPECT_LE(rep.worst, 1e-4);
}

TEST(BatchNorm, TwoValuesPerChannel) {
  Tape<double> tape;
  Tensor<double> x({2, 1, 1}, {1, 3});
  Tensor<double> rm({1}), rv({1}, 1.0);
  auto y = batchnorm(tape, x, Tensor<double>({1}, 1.0), Tensor<double>({1}), rm, rv, Mode::train);
  EXPECT_NEAR(y[0], -1.0, 1e-5);
  EXPECT_NEAR(y[1], 1.0, 1e-5);
  EXPECT_NEAR(rm[0], 0.1 * 2.0, 1e-12);
  EXPECT_NEAR(rv[0], 0.9 + 0.1 * 1.0, 1e-12);
}

TEST(BatchNorm, ConstantInputGivesBeta) {
  Tape<double> tape;
  Tensor<double> rm({2}), rv({2}, 1.0);
  auto y = batchnorm(tape, Tensor<double>({3, 2, 4}, 5.0), Tensor<double>({2}, 2.0), Tensor<double>({2}, {0.5, -1}),
                     rm, rv, Mode::train);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_NEAR(y.at({b, 0, i}), 0.5, 1e-9);
      EXPECT_NEAR(y.at({b, 1, i}), -1.0, 1e-9);
    }
}

TEST(BatchNorm, EvalWithUnitStatsIsIdentity) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 5}, rng);
  Tensor<double> rm({3}), rv({3}, 1.0);
  Tape<double> tape;
  auto y = batchnorm(tape, x, Tensor<double>({3}, 1.0), Tensor<double>({3}), rm, rv, Mode::eval);
  EXPECT_LE(max_abs_diff(y, x), 1e-5);
}

TEST(BatchNorm, SingleValuePerChannelRejectedInTraining) {
  Tape<double> tape;
  Tensor<double> rm({2}), rv({2}, 1.0);
  EXPECT_THROW(batchnorm(tape, Tensor<double>({1, 2}), Tensor<double>({2}, 1.0), Tensor<double>({2}), rm, rv,
                         Mode::train),
               Error);
}

TEST(BatchNorm, NormalizedStatistics) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({4, 3, 7}, rng, 5.0);
    for (auto& v : x.data()) v += 3.0;
    Tensor<double> rm({3}), rv({3}, 1.0);
    Tape<double> tape;
    auto y = batchnorm(tape, x, Tensor<double>({3}, 1.0), Tensor<double>({3}), rm, rv, Mode::train);
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0, q = 0;
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < 7; ++i) m += y.at({b, c, i});
      m /= 28;
      for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < 7; ++i) q += (y.at({b, c, i}) - m) * (y.at({b, c, i}) - m);
      EXPECT_LE(std::abs(m), 1e-5);
      EXPECT_NEAR(q / 28, 1.0, 1e-4);
    }
  }
}

TEST(BatchNorm, GradientsBothModes) {
  std::mt19937_64 rng(13);
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto x = random_tensor({3, 2, 4}, rng, 2.0);
    auto g = random_tensor({2}, rng), be = random_tensor({2}, rng), r = random_tensor({3, 2, 4}, rng);
    Tensor<double> rm({2}, {0.1, -0.2}), rv({2}, {1.5, 0.7});
    const auto rep = gradcheck::check({x, g, be}, [&](Tape<double>& t) {
      Tensor<double> m = rm.clone(), v = rv.clone();
      return sum(t, mul(t, batchnorm(t, x, g, be, m, v, mode), r));
    });
    EXPECT_LE(rep.worst, 1e-4);
  }
}

TEST(Dropout, RateZeroAndEvalAreIdentity) {
  std::mt19937_64 rng(1);
  auto x = random_tensor({50}, rng);
  Tape<double> tape;
  EXPECT_EQ(values(dropout(tape, x, 0.0, Mode::train, rng)), values(x));
  EXPECT_EQ(values(dropout(tape, x, 0.9, Mode::eval, rng)), values(x));
  EXPECT_THROW(dropout(tape, x, 1.0, Mode::train, rng), Error);
  EXPECT_THROW(dropout(tape, x, -0.1, Mode::train, rng), Error);
}

TEST(Dropout, HalfRateStatistics) {
  std::mt19937_64 rng(77);
  Tensor<double> x({100000});
  std::uniform_real_distribution<double> u(0.5, 1.5);
  for (auto& v : x.data()) v = u(rng);
  Tape<double> tape;
  auto y = dropout(tape, x, 0.5, Mode::train, rng);
  std::size_t kept = 0;
  double in = 0, out = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    kept += y[i] != 0.0;
    in += x[i];
    out += y[i];
  }
  EXPECT_NEAR(double(kept) / double(x.size()), 0.5, 0.01);
  EXPECT_NEAR(out / in, 1.0, 0.02);
}

TEST(Dropout, GradientUsesMask) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({40}, rng);
  auto r = random_tensor({40}, rng);
  const auto rep = gradcheck::check({x}, [&](Tape<double>& t) {
    std::mt19937_64 mask_rng(99);
    return sum(t, mul(t, dropout(t, x, 0.3, Mode::train, mask_rng), r));
  });
  EXPECT_LE(rep.worst, 1e-4);
}

TEST(Linear, Gradients) {
  std::mt19937_64 rng(14);
  auto x = random_tensor({3, 5}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({4}, rng);
  auto r = random_tensor({3, 4}, rng);
  const auto rep = gradcheck::check({x, w, b}, [&](Tape<double>& t) { return sum(t, mul(t, linear(t, x, w, b), r)); });
  EXPECT_LE(rep.worst, 1e-4);
}

TEST(Concat, ThreeScalesStackInOrder) {
  std::mt19937_64 rng(15);
  std::vector<Tensor<double>> maps;
  for (int i = 0; i < 3; ++i) maps.push_back(random_tensor({1, 32, 441}, rng));
  Tape<double> tape;
  auto y = concat_channels(tape, maps);
  EXPECT_EQ(y.shape(), (Shape{1, 96, 441}));
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t t = 0; t < 441; ++t) ASSERT_EQ(y.at({0, s * 32 + r, t}), maps[s].at({0, r, t}));
}

TEST(Concat, SingleMapUnchanged) {
  std::mt19937_64 rng(16);
  auto m = random_tensor({2, 4, 5}, rng);
  Tape<double> tape;
  EXPECT_EQ(values(concat_channels(tape, {m})), values(m));
}

TEST(Concat, TimeMismatchRejected) {
  Tape<double> tape;
  EXPECT_THROW(concat_channels(tape, {Tensor<double>({1, 2, 5}), Tensor<double>({1, 2, 6})}), Error);
}

TEST(Concat, Gradients) {
  std::mt19937_64 rng(17);
  auto a = random_tensor({2, 2, 3}, rng), b = random_tensor({2, 1, 3}, rng), r = random_tensor({2, 3, 3}, rng);
  const auto rep =
      gradcheck::check({a, b}, [&](Tape<double>& t) { return sum(t, mul(t, concat_channels(t, {a, b}), r)); });
  EXPECT_LE(rep.worst, 1e-4);
}
