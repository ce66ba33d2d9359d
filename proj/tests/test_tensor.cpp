#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "kpn/kpn.hpp"
#include "support/gradcheck.hpp"

using namespace kpn;

namespace {

std::vector<float> vals(const Tensor<float>& t) { return {t.values().begin(), t.values().end()}; }

TEST(Tensor, RejectsZeroExtentsAndWrongValueCount) {
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, BackwardNeedsScalar) {
  Tensor<float> x({2}, 1.0f, true);
  EXPECT_THROW(backward(scale(x, 2.0f)), ShapeError);
}

TEST(Tensor, GradientsAccumulateAcrossUsesOfOneLeaf) {
  Tensor<double> x({3}, std::vector<double>{1, 2, 3}, true);
  backward(sum_squares(add(x, x)));  // sum (2x)^2 -> grad 8x
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 24.0);
}

TEST(Tensor, DetachCutsHistory) {
  Tensor<double> x({2}, std::vector<double>{1, 2}, true);
  const auto y = scale(x, 3.0).detach();
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(y.values()[1], 6.0);
}

TEST(Conv2d, OutputShape) {
  Tensor<float> x({1, 1, 4, 4}, 1.0f);
  Tensor<float> w({1, 1, 3, 3}, 1.0f);
  const auto y = conv2d(x, w, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  EXPECT_FLOAT_EQ(y.values()[0], 9.0f);
}

TEST(Conv2d, ZeroInputGivesZeroOutput) {
  std::mt19937_64 rng(3);
  const auto w = check::random_tensor<float>({4, 2, 3, 3}, rng);
  const auto y = conv2d(Tensor<float>({2, 2, 5, 5}, 0.0f), w, 2, 1);
  for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, MatchesDirectSummation) {
  std::mt19937_64 rng(11);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u, 2u}) {
      const auto x = check::random_tensor<double>({2, 3, 7, 6}, rng);
      const auto w = check::random_tensor<double>({4, 3, 3, 3}, rng);
      const auto y = conv2d(x, w, stride, pad);
      const std::size_t oh = y.extent(2), ow = y.extent(3);
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
              double acc = 0;
              for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t a = 0; a < 3; ++a)
                  for (std::size_t b = 0; b < 3; ++b) {
                    const long yy = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                    const long xx = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                    if (yy < 0 || xx < 0 || yy >= 7 || xx >= 6) continue;
                    acc += x.values()[((n * 3 + c) * 7 + yy) * 6 + xx] * w.values()[((o * 3 + c) * 3 + a) * 3 + b];
                  }
              EXPECT_NEAR(y.values()[((n * 4 + o) * oh + i) * ow + j], acc, 1e-12);
            }
    }
  }
}

TEST(Conv2d, ErrorsOnChannelMismatchAndOversizedKernel) {
  EXPECT_THROW(conv2d(Tensor<float>({1, 2, 4, 4}), Tensor<float>({1, 3, 3, 3}), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor<float>({1, 1, 2, 2}), Tensor<float>({1, 1, 3, 3}), 1, 0), ConfigError);
}

TEST(BatchNorm, TrainModeNormalizesEachChannel) {
  std::mt19937_64 rng(5);
  const auto x = check::random_tensor<float>({8, 3, 4, 4}, rng, -3.0, 5.0);
  BatchNormState<float> st(3);
  const auto y = batch_norm(x, Tensor<float>({3}, 1.0f), Tensor<float>({3}, 0.0f), st, Mode::train);
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t p = 0; p < 16; ++p) sum += y.values()[(n * 3 + c) * 16 + p];
    const double mean = sum / 128;
    for (std::size_t n = 0; n < 8; ++n)
      for (std::size_t p = 0; p < 16; ++p) sq += std::pow(y.values()[(n * 3 + c) * 16 + p] - mean, 2);
    EXPECT_NEAR(mean, 0.0, 1e-4);
    EXPECT_NEAR(sq / 128, 1.0, 1e-4);
  }
}

TEST(BatchNorm, EvalModeIsAffineInRunningStats) {
  Tensor<float> x({1, 1, 1, 3}, std::vector<float>{-1, 0, 2});
  BatchNormState<float> st(1);
  const auto y = batch_norm(x, Tensor<float>({1}, 2.0f), Tensor<float>({1}, 3.0f), st, Mode::eval);
  // var 1 + eps: 2x / sqrt(1 + 1e-5) + 3
  const float k = 2.0f / std::sqrt(1.0f + 1e-5f);
  EXPECT_NEAR(y.values()[0], -k + 3, 1e-6);
  EXPECT_NEAR(y.values()[1], 3, 1e-6);
  EXPECT_NEAR(y.values()[2], 2 * k + 3, 1e-6);
}

TEST(BatchNorm, ConstantChannelStaysFinite) {
  BatchNormState<float> st(1);
  const auto y = batch_norm(Tensor<float>({1, 1, 2, 2}, 4.0f), Tensor<float>({1}, 1.0f), Tensor<float>({1}, 0.0f), st,
                            Mode::train);
  for (float v : y.values()) EXPECT_EQ(v, 0.0f);
}

TEST(BatchNorm, RunningStatsUseMomentum) {
  BatchNormState<double> st(1);
  Tensor<double> x({4, 1}, std::vector<double>{1, 2, 3, 4});
  batch_norm(x, Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.0), st, Mode::train);
  EXPECT_NEAR(st.running_mean[0], 0.1 * 2.5, 1e-12);
  EXPECT_NEAR(st.running_var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-12);  // unbiased variance 5/3
}

TEST(Activation, LeakyReluExamples) {
  Tensor<float> x({3}, std::vector<float>{-2, 0, 3});
  EXPECT_EQ(vals(leaky_relu(x, 0.25f)), (std::vector<float>{-0.5f, 0.0f, 3.0f}));
  EXPECT_EQ(vals(leaky_relu(x, 1.0f)), vals(x));
  EXPECT_EQ(vals(relu(x)), (std::vector<float>{0.0f, 0.0f, 3.0f}));
}

TEST(Pooling, MaxPoolAndGlobalAverage) {
  Tensor<float> x({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(vals(max_pool2d(x, 2, 2)), (std::vector<float>{4}));
  const auto g = global_avg_pool(Tensor<float>({2, 3, 4, 5}, 1.5f));
  EXPECT_EQ(g.shape(), (Shape{2, 3}));
  for (float v : g.values()) EXPECT_FLOAT_EQ(v, 1.5f);
  EXPECT_THROW(max_pool2d(x, 3, 1), ConfigError);
}

TEST(Dense, IdentityAndBias) {
  Tensor<float> x({2, 2}, std::vector<float>{1, 2, 3, 4});
  EXPECT_EQ(vals(dense(x, Tensor<float>({2, 2}, std::vector<float>{1, 0, 0, 1}), Tensor<float>({2}, 0.0f))), vals(x));
  const auto y = dense(x, Tensor<float>({2, 3}, 0.0f), Tensor<float>({3}, std::vector<float>{7, 8, 9}));
  EXPECT_EQ(vals(y), (std::vector<float>{7, 8, 9, 7, 8, 9}));
}

TEST(CrossEntropy, UniformAndConfidentLogits) {
  const int label[] = {3};
  EXPECT_NEAR(softmax_cross_entropy(Tensor<float>({1, 10}, 0.0f), std::span<const int>(label)).item(),
              std::log(10.0), 1e-6);
  std::vector<float> logits(10, 0.0f);
  logits[3] = 100.0f;
  EXPECT_NEAR(softmax_cross_entropy(Tensor<float>({1, 10}, logits), std::span<const int>(label)).item(), 0.0, 1e-6);
  const int bad[] = {10};
  EXPECT_THROW(softmax_cross_entropy(Tensor<float>({1, 10}, 0.0f), std::span<const int>(bad)), DataError);
}

TEST(Sgd, PlainStepAndFrozenParameter) {
  Parameter<double> p("w", Tensor<double>({2}, std::vector<double>{1.0, -1.0}));
  Parameter<double> frozen("f", Tensor<double>({1}, 5.0), 0.0, false);
  backward(add(sum_squares(p.tensor), scale(sum_squares(p.tensor), 0.0)));  // grad 2w
  Parameter<double>* ps[] = {&p, &frozen};
  sgd_step<double>(ps, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p.tensor.values()[0], 1.0 - 0.1 * 2.0);
  EXPECT_DOUBLE_EQ(p.tensor.values()[1], -1.0 + 0.1 * 2.0);
  EXPECT_EQ(frozen.tensor.values()[0], 5.0);
}

TEST(Sgd, MomentumMatchesHandRolledRecurrence) {
  Parameter<double> p("w", Tensor<double>({1}, 2.0), 0.01);
  double w = 2.0, v = 0.0;
  Parameter<double>* ps[] = {&p};
  for (int step = 0; step < 2; ++step) {
    backward(sum_squares(p.tensor));
    const double g = 2 * w;
    sgd_step<double>(ps, 0.1, 0.9);
    zero_grad<double>(ps);
    v = 0.9 * v + g + 0.01 * w;
    w -= 0.1 * v;
    EXPECT_NEAR(p.tensor.values()[0], w, 1e-15);
  }
}

// Weight decay inside the optimizer equals adding (decay / 2) * ||w||^2 to the loss.
TEST(Sgd, WeightDecayEqualsExplicitL2Penalty) {
  std::mt19937_64 rng(9);
  const auto init = check::random_tensor<double>({6}, rng);
  const auto x = check::random_tensor<double>({3, 6}, rng);
  const double decay = 0.05;
  Parameter<double> a("a", init.clone(), decay), b("b", init.clone(), 0.0);
  Parameter<double>*pa[] = {&a}, *pb[] = {&b};
  for (int step = 0; step < 5; ++step) {
    const auto la = sum_squares(dense(x, reshape(a.tensor, {6, 1}), Tensor<double>({1}, 0.0)));
    backward(la);
    sgd_step<double>(pa, 0.05, 0.9);
    zero_grad<double>(pa);
    const auto lb = add(sum_squares(dense(x, reshape(b.tensor, {6, 1}), Tensor<double>({1}, 0.0))),
                        scale(sum_squares(b.tensor), decay / 2));
    backward(lb);
    sgd_step<double>(pb, 0.05, 0.9);
    zero_grad<double>(pb);
  }
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.tensor.values()[i], b.tensor.values()[i], 1e-12);
}

TEST(Ops, ConvIsLinearInItsInput) {
  std::mt19937_64 rng(21);
  const auto a = check::random_tensor<double>({2, 3, 5, 5}, rng);
  const auto b = check::random_tensor<double>({2, 3, 5, 5}, rng);
  const auto w = check::random_tensor<double>({2, 3, 3, 3}, rng);
  const auto lhs = conv2d(add(scale(a, 2.0), b), w, 1, 1);
  const auto rhs = add(scale(conv2d(a, w, 1, 1), 2.0), conv2d(b, w, 1, 1));
  for (std::size_t i = 0; i < lhs.numel(); ++i) EXPECT_NEAR(lhs.values()[i], rhs.values()[i], 1e-12);
}

TEST(Ops, WeightedAbsMeanSubgradientAtZeroIsZero) {
  Tensor<double> a({2}, std::vector<double>{1.0, 2.0}, true);
  Tensor<double> b({2}, std::vector<double>{1.0, 0.0}, true);
  const double w[] = {1.0, 1.0};
  const auto l = weighted_abs_mean<double>(w, a, b);
  EXPECT_DOUBLE_EQ(l.item(), 1.0);
  backward(l);
  EXPECT_EQ(a.grad()[0], 0.0);
  EXPECT_EQ(a.grad()[1], 0.5);
  EXPECT_EQ(b.grad()[1], -0.5);
}

TEST(Ops, ForwardIsDeterministic) {
  std::mt19937_64 r1(4), r2(4);
  Network<float> n1(teacher_cnn(10, {1, 28, 28}), "t", 3), n2(teacher_cnn(10, {1, 28, 28}), "t", 3);
  const auto x = check::random_tensor<float>({4, 1, 28, 28}, r1, 0, 1);
  const auto y1 = n1.forward(x, Mode::train), y2 = n2.forward(x, Mode::train);
  EXPECT_EQ(vals(y1), vals(y2));
}

}  // namespace
