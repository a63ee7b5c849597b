#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "stpl/diffcore/gradcheck.hpp"
#include "support.hpp"

using namespace stpl;
using stpl::testing::random_tensor;

namespace {

constexpr int kSeeds = 10;

Tensor<double> t2(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor<double>({r, c}, std::move(v));
}

}  // namespace

TEST(Tensor, RejectsZeroExtentAndMismatchedData) {
  EXPECT_THROW(Tensor<double>({2, 0}), DimensionError);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Linear, ZeroWeightGivesBias) {
  Tape<double> tape;
  auto y = linear(tape.constant(t2(1, 2, {1, 2})), tape.constant(t2(2, 2, {0, 0, 0, 0})),
                  tape.constant(Tensor<double>({2}, {3, 4})));
  EXPECT_EQ(y.value().vec(), (std::vector<double>{3, 4}));
}

TEST(Linear, IdentityWeight) {
  Tape<double> tape;
  auto y = linear(tape.constant(t2(1, 2, {1, 0})), tape.constant(t2(2, 2, {1, 0, 0, 1})),
                  tape.constant(Tensor<double>({2}, {0, 0})));
  EXPECT_EQ(y.value().vec(), (std::vector<double>{1, 0}));
}

TEST(Linear, ShapeMismatchNamesBothShapes) {
  Tape<double> tape;
  try {
    linear(tape.constant(Tensor<double>({1, 3})), tape.constant(Tensor<double>({2, 2})),
           tape.constant(Tensor<double>({2})));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,2]"), std::string::npos) << msg;
  }
}

TEST(Linear, GradCheck) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(s);
    auto r = grad_check(
        [](Tape<double>&, const std::vector<Var<double>>& v) { return linear(v[0], v[1], v[2]); },
        {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng), random_tensor({5}, rng)});
    EXPECT_TRUE(r.passed) << "seed " << s << ": " << r.message;
  }
}

TEST(Conv2d, OneByOneIdentity) {
  std::mt19937_64 rng(3);
  Tape<double> tape;
  auto x = random_tensor({1, 5, 6}, rng);
  auto y = conv2d(tape.constant(x), tape.constant(Tensor<double>({1, 1, 1, 1}, 1.0)),
                  tape.constant(Tensor<double>({1}, 0.0)), 0);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, ConstantInputGivesConstantInterior) {
  std::mt19937_64 rng(4);
  Tape<double> tape;
  auto y = conv2d(tape.constant(Tensor<double>({2, 7, 7}, 0.3)), tape.constant(random_tensor({3, 2, 3, 3}, rng)),
                  tape.constant(random_tensor({3}, rng)), 1);
  ASSERT_EQ(y.shape(), (Shape{3, 7, 7}));
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 1; i < 6; ++i) {
      for (std::size_t j = 1; j < 6; ++j) EXPECT_DOUBLE_EQ(y.value().at(c, i, j), y.value().at(c, 1, 1));
    }
  }
}

TEST(Conv2d, EvenKernelIsConfigError) {
  Tape<double> tape;
  EXPECT_THROW(conv2d(tape.constant(Tensor<double>({1, 4, 4})), tape.constant(Tensor<double>({1, 1, 2, 2})),
                      tape.constant(Tensor<double>({1})), 1),
               ConfigError);
}

TEST(Conv2d, MatchesDirectLoopWithStride) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({2, 6, 6}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  Tape<double> tape;
  auto y = conv2d(tape.constant(x), tape.constant(k), tape.constant(b), 1, 2);
  ASSERT_EQ(y.shape(), (Shape{3, 3, 3}));
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double acc = b[o];
        for (std::size_t c = 0; c < 2; ++c) {
          for (int di = 0; di < 3; ++di) {
            for (int dj = 0; dj < 3; ++dj) {
              const int yy = static_cast<int>(2 * i) + di - 1, xx = static_cast<int>(2 * j) + dj - 1;
              if (yy < 0 || xx < 0 || yy >= 6 || xx >= 6) continue;
              acc += k[((o * 2 + c) * 3 + di) * 3 + dj] * x.at(c, yy, xx);
            }
          }
        }
        EXPECT_NEAR(y.value().at(o, i, j), acc, 1e-12);
      }
    }
  }
}

TEST(Conv2d, GradCheck) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(100 + s);
    const std::size_t stride = s % 2 ? 2 : 1;
    auto r = grad_check(
        [stride](Tape<double>&, const std::vector<Var<double>>& v) { return conv2d(v[0], v[1], v[2], 1, stride); },
        {random_tensor({2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
    EXPECT_TRUE(r.passed) << "seed " << s << ": " << r.message;
  }
}

TEST(Elementwise, SigmoidOfZeroIsHalf) {
  Tape<double> tape;
  EXPECT_EQ(sigmoid(tape.constant(Tensor<double>({1}, 0.0))).value()[0], 0.5);
  Tape<float> tf;
  EXPECT_EQ(sigmoid(tf.constant(Tensor<float>({1}, 0.0f))).value()[0], 0.5f);
}

TEST(Elementwise, AddZerosIsIdentity) {
  std::mt19937_64 rng(6);
  Tape<double> tape;
  auto x = random_tensor({2, 3}, rng);
  EXPECT_EQ(add(tape.constant(x), tape.constant(Tensor<double>({2, 3}))).value(), x);
}

TEST(Elementwise, NonBroadcastableIsDimensionError) {
  Tape<double> tape;
  EXPECT_THROW(mul(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({3, 2}))), DimensionError);
  EXPECT_THROW(add(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({2}))), DimensionError);
}

TEST(Elementwise, BroadcastGradChecks) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(200 + s);
    auto r1 = grad_check([](Tape<double>&, const std::vector<Var<double>>& v) { return mul(v[0], v[1]); },
                         {random_tensor({2, 1, 1, 1}, rng), random_tensor({2, 3, 4, 4}, rng)});
    EXPECT_TRUE(r1.passed) << "seed " << s << ": " << r1.message;
    auto r2 = grad_check([](Tape<double>&, const std::vector<Var<double>>& v) { return mul(v[1], v[0]); },
                         {random_tensor({1, 1, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng)});
    EXPECT_TRUE(r2.passed) << "seed " << s << ": " << r2.message;
    auto r3 = grad_check(
        [](Tape<double>&, const std::vector<Var<double>>& v) {
          return scale(relu(add(v[0], v[1])), 1.7);
        },
        {random_tensor({2, 3, 4}, rng), random_tensor({2, 1, 4}, rng)});
    EXPECT_TRUE(r3.passed) << "seed " << s << ": " << r3.message;
    auto r4 = grad_check([](Tape<double>&, const std::vector<Var<double>>& v) { return sigmoid(sigmoid(v[0])); },
                         {random_tensor({3, 4}, rng, -4, 4)});
    EXPECT_TRUE(r4.passed) << "seed " << s << ": " << r4.message;
  }
}

TEST(Pool, AvgOfConstant) {
  Tape<double> tape;
  auto y = pool(tape.constant(Tensor<double>({2, 3, 4}, 2.5)), PoolKind::kAvg, AxisSet::kChannelAndSpatial);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.value()[0], 2.5);
}

TEST(Pool, MaxRoutesGradientToArgmax) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({3}, {1, 5, 3}), true);
  auto y = pool(x, PoolKind::kMax, std::vector<std::size_t>{0});
  EXPECT_EQ(y.value()[0], 5.0);
  tape.backward(y);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 0}));
}

TEST(Pool, MaxTieGoesToFirstElement) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({4}, {2, 7, 7, 1}), true);
  tape.backward(pool(x, PoolKind::kMax, std::vector<std::size_t>{0}));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 0, 0}));
}

TEST(Pool, EmptyAxisSetIsConfigError) {
  Tape<double> tape;
  EXPECT_THROW(pool(tape.constant(Tensor<double>({2, 2})), PoolKind::kAvg, std::vector<std::size_t>{}),
               ConfigError);
}

TEST(Pool, GradChecks) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(300 + s);
    for (auto set : {AxisSet::kSpatial, AxisSet::kChannelAndSpatial, AxisSet::kChannel}) {
      for (auto kind : {PoolKind::kAvg, PoolKind::kMax}) {
        auto r = grad_check(
            [set, kind](Tape<double>&, const std::vector<Var<double>>& v) { return pool(v[0], kind, set); },
            {random_tensor({2, 3, 4, 4}, rng)});
        EXPECT_TRUE(r.passed) << "seed " << s << ": " << r.message;
      }
    }
  }
}

TEST(BilinearSample, IdentityGridIsExact) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor({3, 5, 6}, rng);
  Tensor<double> coords({2, 5, 6});
  for (std::size_t y = 0; y < 5; ++y) {
    for (std::size_t xx = 0; xx < 6; ++xx) {
      coords.at(0, y, xx) = static_cast<double>(xx);
      coords.at(1, y, xx) = static_cast<double>(y);
    }
  }
  Tape<double> tape;
  EXPECT_EQ(bilinear_sample(tape.constant(x), coords).value(), x);
}

TEST(BilinearSample, HalfPixelRowWithZeroPadding) {
  Tape<double> tape;
  Tensor<double> coords({2, 1, 3});
  for (std::size_t i = 0; i < 3; ++i) coords[i] = static_cast<double>(i) - 0.5;
  auto y = bilinear_sample(tape.constant(Tensor<double>({1, 1, 3}, {1, 2, 3})), coords);
  EXPECT_EQ(y.value().vec(), (std::vector<double>{0.5, 1.5, 2.5}));
}

TEST(BilinearSample, GradCheck) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(400 + s);
    auto coords = random_tensor({2, 4, 5}, rng, -1.5, 5.5);
    auto r = grad_check(
        [coords](Tape<double>&, const std::vector<Var<double>>& v) { return bilinear_sample(v[0], coords); },
        {random_tensor({2, 4, 5}, rng)});
    EXPECT_TRUE(r.passed) << "seed " << s << ": " << r.message;
  }
}

TEST(SoftmaxCrossEntropy, ShiftInvariance) {
  std::mt19937_64 rng(8);
  auto logits = random_tensor({4, 3, 3}, rng, -3, 3);
  std::vector<int> targets(9);
  for (auto& t : targets) t = static_cast<int>(rng() % 4);
  std::vector<std::uint8_t> mask(9, 1);
  Tape<double> tape;
  const double a = softmax_cross_entropy(tape.constant(logits), targets, mask).loss.value()[0];
  for (std::size_t p = 0; p < 9; ++p) {
    const double c = static_cast<double>(p) * 3.7 - 10.0;
    for (std::size_t k = 0; k < 4; ++k) logits[k * 9 + p] += c;
  }
  const double b = softmax_cross_entropy(tape.constant(logits), targets, mask).loss.value()[0];
  EXPECT_NEAR(a, b, 1e-9);
}

TEST(SoftmaxCrossEntropy, EmptyMaskIsSentinel) {
  Tape<double> tape;
  std::vector<int> targets(4, 0);
  std::vector<std::uint8_t> mask(4, 0);
  auto r = softmax_cross_entropy(tape.constant(Tensor<double>({2, 2, 2})), targets, mask);
  EXPECT_TRUE(r.sentinel);
  EXPECT_EQ(r.loss.value()[0], 0.0);
}

TEST(SoftmaxCrossEntropy, GradCheck) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(500 + s);
    std::vector<int> targets(12);
    std::vector<std::uint8_t> mask(12);
    for (std::size_t i = 0; i < 12; ++i) {
      targets[i] = static_cast<int>(rng() % 3);
      mask[i] = (rng() % 4) != 0;
    }
    mask[0] = 1;
    auto r = grad_check(
        [targets, mask](Tape<double>&, const std::vector<Var<double>>& v) {
          return softmax_cross_entropy(v[0], targets, mask).loss;
        },
        {random_tensor({3, 3, 4}, rng, -2, 2)});
    EXPECT_TRUE(r.passed) << "seed " << s << ": " << r.message;
  }
}

TEST(ShapeOps, GradChecks) {
  for (int s = 0; s < kSeeds; ++s) {
    std::mt19937_64 rng(600 + s);
    auto r = grad_check(
        [](Tape<double>&, const std::vector<Var<double>>& v) {
          auto c = concat(v[0], v[1], 0);
          auto st = stack(c, c);
          return l2_normalize_channels(sum_leading(st));
        },
        {random_tensor({2, 3, 3}, rng), random_tensor({3, 3, 3}, rng)});
    EXPECT_TRUE(r.passed) << "seed " << s << ": " << r.message;
    const std::vector<std::size_t> pix{0, 4, 5, 8};
    auto r2 = grad_check(
        [pix](Tape<double>&, const std::vector<Var<double>>& v) {
          return gather_pixels(reshape(v[0], {3, 3, 3}), std::span<const std::size_t>(pix));
        },
        {random_tensor({27}, rng)});
    EXPECT_TRUE(r2.passed) << "seed " << s << ": " << r2.message;
  }
}

TEST(Backward, LeafGradientsMirrorShapes) {
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>({2, 3}, 1.0), true);
  auto unused = tape.leaf(Tensor<double>({4}, 1.0), true);
  tape.backward(sum(scale(a, 2.0)));
  ASSERT_EQ(a.grad().size(), 6u);
  for (auto g : a.grad()) EXPECT_EQ(g, 2.0);
  ASSERT_EQ(unused.grad().size(), 4u);
  for (auto g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarAndReuseRejected) {
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>({2}, 1.0), true);
  EXPECT_THROW(tape.backward(a), ContractError);
  auto l = sum(a);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), ContractError);
}

TEST(Backward, ForwardIsDeterministic) {
  std::mt19937_64 rng(9);
  auto x = random_tensor({2, 6, 6}, rng), k = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2}, rng);
  Tape<double> t1, t2;
  auto y1 = sigmoid(conv2d(t1.constant(x), t1.constant(k), t1.constant(b), 1));
  auto y2 = sigmoid(conv2d(t2.constant(x), t2.constant(k), t2.constant(b), 1));
  EXPECT_EQ(y1.value(), y2.value());
}

TEST(GradCheck, SigmoidChainPasses) {
  std::mt19937_64 rng(10);
  auto r = grad_check(
      [](Tape<double>&, const std::vector<Var<double>>& v) { return sigmoid(linear(v[0], v[1], v[2])); },
      {random_tensor({2, 3}, rng), random_tensor({3, 2}, rng), random_tensor({2}, rng)});
  EXPECT_TRUE(r.passed) << r.message;
  EXPECT_EQ(r.elements_checked, 6u + 6u + 2u);
}

TEST(GradCheck, DoubledGradientFails) {
  std::mt19937_64 rng(11);
  auto broken = [](Tape<double>& tape, const std::vector<Var<double>>& v) {
    const auto id = v[0].id();
    Tensor<double> out = v[0].value();
    for (auto& x : out.data()) x = x * x;
    return tape.record(std::move(out), {v[0]}, [id](Tape<double>& t, std::span<const double> g) {
      auto buf = t.grad_buffer(id);
      const auto& x = t.value(id);
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] += 2.0 * (2.0 * x[i]) * g[i];
    });
  };
  auto r = grad_check(broken, {random_tensor({5}, rng, 0.5, 1.5)});
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_rel_error, 0.5, 1e-6);
}

TEST(GradCheck, NonFiniteIsReportedWithLocation) {
  auto fn = [](Tape<double>& tape, const std::vector<Var<double>>& v) {
    Tensor<double> out = v[0].value();
    for (auto& x : out.data()) x = std::sqrt(x);
    const auto id = v[0].id();
    return tape.record(std::move(out), {v[0]}, [id](Tape<double>& t, std::span<const double> g) {
      auto buf = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i] / (2.0 * std::sqrt(t.value(id)[i]));
    });
  };
  auto r = grad_check(fn, {Tensor<double>({3}, {1.0, 0.0, 2.0})});
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.worst_element, 1u);
  EXPECT_NE(r.message.find("element 1"), std::string::npos);
}
