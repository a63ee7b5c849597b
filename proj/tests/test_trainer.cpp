#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "stpl/metrics.hpp"
#include "stpl/trainer.hpp"
#include "support.hpp"

using namespace stpl;

namespace {

std::vector<VideoSequence> source_set(std::size_t n, std::size_t size, std::uint64_t base = 0) {
  std::vector<VideoSequence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sequence(base + i, source_domain(), 2, size, size, 4));
  return out;
}

std::vector<UnlabeledSequence> target_set(std::size_t n, std::size_t size) {
  std::vector<UnlabeledSequence> out;
  const auto td = target_domain(4);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(strip_labels(apply_domain_shift(generate_sequence(500 + i, td, 2, size, size, 4), td, i)));
  }
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

TrainConfig quick(std::size_t iterations, double lr) {
  TrainConfig c;
  c.iterations = iterations;
  c.lr = lr;
  return c;
}

}  // namespace

TEST(Schedule, StartsAtBaseRate) {
  TrainConfig c;
  c.lr = 0.25;
  EXPECT_EQ(lr_schedule(0, c), 0.25);
}

TEST(Schedule, HalfwayMatchesHighPrecisionValue) {
  TrainConfig c;
  c.iterations = 1000;
  c.lr = 1.0;
  EXPECT_NEAR(lr_schedule(500, c), 0.535886731268146582, 1e-15);
}

TEST(Schedule, LastIterationNearZeroAndStrictlyDecreasing) {
  TrainConfig c;
  c.iterations = 20000;
  c.lr = 1.0;
  EXPECT_NEAR(lr_schedule(19999, c), std::pow(1.0 / 20000.0, 0.9), 1e-15);
  EXPECT_LT(lr_schedule(19999, c), 1e-3);
  for (std::size_t i = 1; i < 20000; i += 97) EXPECT_LT(lr_schedule(i, c), lr_schedule(i - 1, c));
}

TEST(Schedule, PastEndIsContractError) {
  TrainConfig c;
  c.iterations = 10;
  EXPECT_THROW(lr_schedule(10, c), ContractError);
}

TEST(Config, InvalidValuesRejected) {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.iterations = 0; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.momentum = 1.0; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.power = 0.0; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.tau = 0.0; })), ConfigError);
  EXPECT_THROW(validate(bad([](TrainConfig& c) { c.k = 1.2; })), ConfigError);
  EXPECT_NO_THROW(validate(TrainConfig{}));
}

TEST(Sgd, ZeroGradientLeavesParams) {
  ParamMap<double> p{{"w", Tensor<double>({3}, {1, 2, 3})}};
  OptimizerState<double> s;
  sgd_step(p, {{"w", Tensor<double>({3})}}, s, 0.1, 0.9);
  EXPECT_EQ(p.at("w"), Tensor<double>({3}, {1, 2, 3}));
}

TEST(Sgd, NoMomentumIsPlainDescent) {
  ParamMap<double> p{{"w", Tensor<double>({2}, {1.0, -1.0})}};
  OptimizerState<double> s;
  sgd_step(p, {{"w", Tensor<double>({2}, {0.5, 2.0})}}, s, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p.at("w")[0], 1.0 - 0.05);
  EXPECT_DOUBLE_EQ(p.at("w")[1], -1.0 - 0.2);
}

TEST(Sgd, TwoMomentumStepsUnrolled) {
  const double lr = 0.01, g = 3.0, theta0 = 2.0;
  ParamMap<double> p{{"w", Tensor<double>({1}, {theta0})}};
  OptimizerState<double> s;
  const ParamMap<double> grads{{"w", Tensor<double>({1}, {g})}};
  sgd_step(p, grads, s, lr, 0.9);
  sgd_step(p, grads, s, lr, 0.9);
  EXPECT_NEAR(p.at("w")[0], theta0 - lr * g - lr * 1.9 * g, 1e-15);
  EXPECT_EQ(s.velocity.at("w").shape(), p.at("w").shape());
}

TEST(Sgd, NonFiniteGradientAbortsWithNameAndIteration) {
  ParamMap<double> p{{"a", Tensor<double>({1}, {1.0})}, {"b", Tensor<double>({2}, {1.0, 1.0})}};
  const auto before = p;
  OptimizerState<double> s;
  ParamMap<double> grads{{"a", Tensor<double>({1}, {1.0})},
                         {"b", Tensor<double>({2}, {0.0, std::numeric_limits<double>::quiet_NaN()})}};
  try {
    sgd_step(p, grads, s, 0.1, 0.9, 42);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos);
    EXPECT_EQ(e.exit_code(), ExitCode::kNumeric);
  }
  EXPECT_EQ(p, before);
}

TEST(EpochOrderTest, EachEpochIsAPermutation) {
  EpochOrder o(7, 3);
  for (int e = 0; e < 4; ++e) {
    std::vector<std::size_t> seen;
    for (int i = 0; i < 7; ++i) seen.push_back(o.next());
    std::sort(seen.begin(), seen.end());
    EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6}));
    EXPECT_TRUE(o.epoch_end());
  }
}

TEST(SourceTraining, LossTrendsDownOnDefaultConfig) {
  auto data = source_set(60, 64);
  TrainConfig c;
  c.lr = kSourceLearningRate;
  auto r = train_source(make_model<float>(ModelConfig{}, 0), data, c);
  ASSERT_FALSE(r.aborted) << r.message;
  ASSERT_EQ(r.log.size(), 1500u);
  std::vector<double> first, last;
  for (std::size_t i = 0; i < 150; ++i) {
    first.push_back(r.log[i].loss);
    last.push_back(r.log[1350 + i].loss);
  }
  EXPECT_LT(median(last), median(first));
}

// Scored at feature resolution against the training targets: nearest
// upsampling of stride-2 predictions alone caps input-resolution mIoU on
// these small shapes well below 0.95 (checked separately below).
TEST(SourceTraining, OverfitsTwoSequences) {
  auto data = source_set(2, 32, 40);
  TrainConfig c = quick(2000, kSourceLearningRate);
  double best = 0.0;
  std::size_t reached = 0;
  auto score = [&](const SegModel<float>& m) {
    std::vector<LabelMap> preds, labels;
    for (const auto& s : data) {
      auto logits = frame_logits(m, s.frames, s.flows, 1);
      const std::size_t h = logits.dim(1), w = logits.dim(2);
      auto cls = argmax_classes(logits);
      auto target = downsample_labels(s.labels[1], 2);
      preds.push_back(LabelMap{h, w, std::vector<std::uint8_t>(cls.begin(), cls.end())});
      labels.push_back(LabelMap{h, w, std::vector<std::uint8_t>(target.begin(), target.end())});
    }
    return miou(preds, labels, 4).miou;
  };
  auto r = train_source(make_model<float>(ModelConfig{}, 1), data, c,
                        IterationHook<float>([&](std::size_t it, const SegModel<float>& m) {
                          if (reached == 0 && (it + 1) % 100 == 0) {
                            best = std::max(best, score(m));
                            if (best > 0.95) reached = it + 1;
                          }
                        }));
  EXPECT_GT(reached, 0u) << "best mIoU " << best;
}

TEST(SourceTraining, NearestUpsamplingCeilingBelowTarget) {
  auto data = source_set(2, 32, 40);
  std::vector<LabelMap> preds, labels;
  for (const auto& s : data) {
    preds.push_back(upsample_classes(downsample_labels(s.labels[1], 2), 16, 16, 2));
    labels.push_back(s.labels[1]);
  }
  EXPECT_LT(miou(preds, labels, 4).miou, 0.95);
}

TEST(SourceTraining, SameSeedIsBitwiseReproducible) {
  auto data = source_set(4, 32);
  auto c = quick(30, 1e-2);
  auto a = train_source(make_model<float>(ModelConfig{}, 2), data, c);
  auto b = train_source(make_model<float>(ModelConfig{}, 2), data, c);
  EXPECT_EQ(a.log.back().loss, b.log.back().loss);
  EXPECT_EQ(a.model.params, b.model.params);
}

TEST(SourceTraining, NanLossAbortsWithLastGoodModel) {
  auto m = make_model<float>(ModelConfig{}, 3);
  m.params.at("cls.bias")[0] = std::numeric_limits<float>::quiet_NaN();
  auto r = train_source(m, source_set(2, 32), quick(5, 1e-2));
  EXPECT_TRUE(r.aborted);
  EXPECT_NE(r.message.find("iteration 0"), std::string::npos) << r.message;
  EXPECT_TRUE(r.log.empty());
}

TEST(Adaptation, ZeroLearningRateLeavesParamsBitwise) {
  auto m = make_model<float>(ModelConfig{}, 4);
  for (auto o : {AdaptObjective::kStpl, AdaptObjective::kVanillaSelfTrain}) {
    auto c = quick(6, 0.0);
    c.objective = o;
    auto r = adapt_sfda(m, target_set(3, 32), c);
    EXPECT_EQ(r.model.params, m.params) << to_string(o);
    EXPECT_EQ(r.log.size(), 6u);
  }
}

TEST(Adaptation, SameSeedIsBitwiseReproducible) {
  auto src = train_source(make_model<float>(ModelConfig{}, 5), source_set(6, 32), quick(60, 1e-2)).model;
  auto tgt = target_set(4, 32);
  auto c = quick(12, 1e-4);
  auto a = adapt_sfda(src, tgt, c);
  auto b = adapt_sfda(src, tgt, c);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  EXPECT_EQ(a.model.params, b.model.params);
}

TEST(Adaptation, ClassifierFrozenUnderContrastOnly) {
  auto src = train_source(make_model<float>(ModelConfig{}, 6), source_set(8, 32), quick(400, 1e-2)).model;
  auto tgt = target_set(4, 32);
  auto c = quick(8, 1e-3);
  c.k = 1.0;
  auto stpl = adapt_sfda(src, tgt, c);
  ASSERT_LT(stpl.empty_steps, 8u);
  EXPECT_EQ(stpl.model.params.at("cls.weight"), src.params.at("cls.weight"));
  EXPECT_EQ(stpl.model.params.at("cls.bias"), src.params.at("cls.bias"));
  EXPECT_NE(stpl.model.params.at("enc.conv0.weight"), src.params.at("enc.conv0.weight"));
}

TEST(Adaptation, MostlyEmptyEpochWarns) {
  // An untrained model is confident on a single class, so no query has negatives.
  auto c = quick(4, 1e-3);
  auto r = adapt_sfda(make_model<float>(ModelConfig{}, 7), target_set(4, 32), c);
  EXPECT_GT(r.empty_steps, 2u);
  ASSERT_FALSE(r.warnings.empty());
  EXPECT_NE(r.warnings.front().find("no confident pairs"), std::string::npos);
}

TEST(Adaptation, NeverReadsSourceFilesOrTargetLabels) {
  const auto root = stpl::testing::scratch_dir("audit");
  write_dataset(source_set(3, 32), root / "source", 4, "source");
  const auto td = target_domain(4);
  std::vector<VideoSequence> tgt;
  for (std::size_t i = 0; i < 3; ++i) tgt.push_back(apply_domain_shift(generate_sequence(700 + i, td, 2, 32, 32, 4), td, i));
  write_dataset(tgt, root / "target", 4, "target");
  save_checkpoint(make_model<float>(ModelConfig{}, 8), root / "ckpt", 0, 8);

  io::ReadAudit::instance().start();
  auto model = load_checkpoint<float>(root / "ckpt");
  auto data = read_unlabeled(root / "target");
  auto r = adapt_sfda(model, data, quick(3, 1e-4));
  auto opened = io::ReadAudit::instance().stop();
  ASSERT_FALSE(opened.empty());
  for (const auto& p : opened) {
    EXPECT_EQ(p.string().find((root / "source").string()), std::string::npos) << p;
    EXPECT_EQ(p.filename().string().find(".labels."), std::string::npos) << p;
  }
}

TEST(LossLog, CsvHasHeaderAndRows) {
  const auto dir = stpl::testing::scratch_dir("losslog");
  write_loss_csv(dir / "loss.csv", {{0, 1.5, 0.1, 2}, {1, 1.25, 0.05, 0}});
  const auto text = io::read_text(dir / "loss.csv");
  EXPECT_EQ(text, "iter,loss,lr,skipped_queries\n0,1.5,0.10000000000000001,2\n1,1.25,0.050000000000000003,0\n");
}
