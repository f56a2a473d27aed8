#include <gtest/gtest.h>

#include <cmath>

#include "dffnet/train.hpp"
#include "helpers.hpp"

using namespace dffnet;
using testing_util::randn;

namespace {

double ce(std::vector<double> logits, int label) {
  Tape<double> t;
  const std::size_t K = logits.size();
  auto z = t.leaf(Tensor<double>(Shape{1, K}, std::move(logits)), "z");
  return ops::cross_entropy(z, {label}).value().item();
}

struct Toy {
  data::Prepared data;
  data::Split split;
  ModelConfig cfg;
};

Toy toy_problem() {
  data::SynthConfig sc;
  sc.classes = 3;
  sc.size = 12;
  sc.bands = 10;
  const auto scene = data::synth_generate(sc);
  Toy t;
  t.split = data::split_dataset(scene.labels, scene.classes, 0.25, 3);
  t.data = data::apply_preprocess(data::fit_preprocess(scene, t.split.train, 6), scene);
  t.cfg.pca_components = 6;
  t.cfg.patch = 5;
  t.cfg.width = 8;
  t.cfg.filter_bases = 2;
  t.cfg.num_classes = 3;
  t.cfg.head_hidden = 16;
  return t;
}

double mean_loss(const Model<double>& m, const data::Prepared& d, const std::vector<std::size_t>& px) {
  const auto b = data::make_batch<double>(d, px, 0, px.size(), m.config().patch);
  Tape<double> t(false);
  BoundParams<double> p(t, m.params());
  auto z = model::forward(p, m.config(), t.constant(b.hsi), t.constant(b.aux));
  return ops::cross_entropy(z, b.labels).value().item();
}

}  // namespace

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(ce({0, 0}, 0), std::log(2.0), 1e-15);
  EXPECT_LT(ce({20, 0}, 0), 1e-8);
  EXPECT_NEAR(ce({1, 2, 3}, 2), std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3, 1e-15);
  EXPECT_NEAR(ce({1, 2, 3}, 2), 0.40761, 1e-5);
}

TEST(CrossEntropy, StableForLargeLogits) {
  EXPECT_NEAR(ce({1000, 0}, 1), 1000.0, 1e-9);
  EXPECT_TRUE(std::isfinite(ce({-1000, 1000}, 0)));
}

TEST(CrossEntropy, LabelOutOfRange) {
  EXPECT_THROW(ce({0, 0}, 2), Error);
  EXPECT_THROW(ce({0, 0}, -1), Error);
}

TEST(Adam, FirstStepClosedForm) {
  for (double g : {1.0, 1000.0, -1e-3}) {
    ParamStore<double> s;
    s.add("w", Tensor<double>::scalar(0.5));
    Adam<double> opt(s, AdamConfig{0.1, 0.9, 0.999, 1e-8, 0});
    const Tensor<double> grad = Tensor<double>::scalar(g);
    opt.step(s, {&grad});
    // m_hat = g, v_hat = g^2: delta = -lr * g / (|g| + eps).
    EXPECT_NEAR(s.get("w").item() - 0.5, -0.1 * g / (std::abs(g) + 1e-8), 1e-15) << g;
    if (std::abs(g) >= 1) EXPECT_NEAR(std::abs(s.get("w").item() - 0.5), 0.1, 1e-7) << g;
  }
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  ParamStore<double> s;
  s.add("a", randn({3, 4}, 1));
  s.add("b", randn({2}, 2));
  const auto before = s;
  Adam<double> opt(s, AdamConfig{});
  const Tensor<double> ga(Shape{3, 4}), gb(Shape{2});
  for (int i = 0; i < 5; ++i) opt.step(s, {&ga, &gb});
  EXPECT_EQ(s, before);
  opt.step(s, {nullptr, nullptr});
  EXPECT_EQ(s, before);
}

TEST(Adam, MatchesReferenceRecurrence) {
  const AdamConfig cfg{3e-3, 0.8, 0.95, 1e-6, 0};
  ParamStore<double> s;
  s.add("w", randn({6}, 3));
  std::vector<double> w(s.get("w").vec()), m(6, 0.0), v(6, 0.0);
  Adam<double> opt(s, cfg);
  for (int t = 1; t <= 7; ++t) {
    const auto g = randn({6}, 100 + t);
    opt.step(s, {&g});
    for (std::size_t j = 0; j < 6; ++j) {
      m[j] = cfg.beta1 * m[j] + (1 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1 - cfg.beta2) * g[j] * g[j];
      const double mh = m[j] / (1 - std::pow(cfg.beta1, t)), vh = v[j] / (1 - std::pow(cfg.beta2, t));
      w[j] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(s.get("w")[j], w[j], 1e-14);
  EXPECT_EQ(opt.step_count(), 7u);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  ParamStore<double> s;
  s.add("good", Tensor<double>::scalar(1));
  s.add("bad", Tensor<double>::scalar(1));
  Adam<double> opt(s, AdamConfig{});
  const auto g1 = Tensor<double>::scalar(0.5), g2 = Tensor<double>::scalar(std::nan(""));
  try {
    opt.step(s, {&g1, &g2});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'bad'"), std::string::npos) << e.what();
  }
  EXPECT_EQ(s.get("good").item(), 1.0);
}

TEST(Metrics, Examples) {
  auto m = metrics(ConfusionMatrix::from_rows({{50, 0}, {0, 50}}));
  EXPECT_EQ(m.oa, 1.0);
  EXPECT_EQ(m.aa, 1.0);
  EXPECT_EQ(m.kappa, 1.0);
  m = metrics(ConfusionMatrix::from_rows({{25, 25}, {25, 25}}));
  EXPECT_EQ(m.oa, 0.5);
  EXPECT_NEAR(m.kappa, 0.0, 1e-15);
  m = metrics(ConfusionMatrix::from_rows({{40, 10}, {20, 30}}));
  EXPECT_NEAR(m.oa, 0.70, 1e-15);
  EXPECT_NEAR(m.aa, 0.70, 1e-15);
  EXPECT_NEAR(m.kappa, 0.40, 1e-15);
}

TEST(Metrics, EmptyRowExcludedFromAa) {
  const auto m = metrics(ConfusionMatrix::from_rows({{3, 1, 0}, {0, 0, 0}, {0, 2, 2}}));
  EXPECT_EQ(m.excluded, std::vector<std::size_t>{1});
  EXPECT_FALSE(m.per_class[1].has_value());
  EXPECT_NEAR(m.aa, (0.75 + 0.5) / 2, 1e-15);
  EXPECT_THROW(metrics(ConfusionMatrix(3)), Error);
}

TEST(Metrics, RangesAndPermutationInvariance) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t K = 2 + rng.below(5);
    std::vector<std::vector<std::uint64_t>> rows(K, std::vector<std::uint64_t>(K));
    for (auto& r : rows)
      for (auto& v : r) v = rng.below(trial % 3 == 0 ? 3 : 40);
    rows[0][0] += 1;
    const auto cm = ConfusionMatrix::from_rows(rows);
    const auto m = metrics(cm);
    EXPECT_GE(m.oa, 0.0);
    EXPECT_LE(m.oa, 1.0);
    EXPECT_GE(m.aa, 0.0);
    EXPECT_LE(m.aa, 1.0);
    EXPECT_GE(m.kappa, -1.0);
    EXPECT_LE(m.kappa, 1.0);
    const auto perm = rng.permutation(K);
    std::vector<std::vector<std::uint64_t>> pr(K, std::vector<std::uint64_t>(K));
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) pr[perm[i]][perm[j]] = rows[i][j];
    const auto mp = metrics(ConfusionMatrix::from_rows(pr));
    EXPECT_NEAR(mp.oa, m.oa, 1e-15);
    EXPECT_NEAR(mp.aa, m.aa, 1e-12);
    EXPECT_NEAR(mp.kappa, m.kappa, 1e-12);
  }
}

TEST(Metrics, KappaOneIffDiagonal) {
  EXPECT_EQ(metrics(ConfusionMatrix::from_rows({{3, 0, 0}, {0, 7, 0}, {0, 0, 1}})).kappa, 1.0);
  EXPECT_LT(metrics(ConfusionMatrix::from_rows({{3, 0, 0}, {0, 7, 1}, {0, 0, 1}})).kappa, 1.0);
}

TEST(ConfusionMatrix, HandCounted) {
  ConfusionMatrix cm(3);
  const std::pair<int, int> samples[] = {{0, 0}, {1, 2}, {2, 2}, {1, 1}};
  for (auto [t, p] : samples) cm.add(t, p);
  EXPECT_EQ(cm.total(), 4u);
  const std::uint64_t want[3][3] = {{1, 0, 0}, {0, 1, 1}, {0, 0, 1}};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(cm.at(i, j), want[i][j]);
  EXPECT_EQ(cm.to_csv(), "1,0,0\n0,1,1\n0,0,1\n");
  EXPECT_THROW(cm.add(3, 0), Error);
}

TEST(Evaluate, ArgmaxTiesPickLowestIndex) {
  const auto p = argmax_rows(Tensor<double>::from({3, 3}, {1, 1, 0, 0, 2, 2, 5, 5, 5}));
  EXPECT_EQ(p, (std::vector<int>{0, 1, 0}));
}

TEST(Evaluate, ConstantPredictorFillsOneColumn) {
  auto t = toy_problem();
  Model<double> m(t.cfg);
  m.params().get("head.fc2.w").fill(0.0);
  m.params().get("head.fc2.b") = Tensor<double>::from({3}, {0, 1, 0});
  const auto cm = evaluate(m, t.data, t.split.test, 16);
  EXPECT_EQ(cm.total(), t.split.test.size());
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(cm.at(i, 0), 0u);
    EXPECT_EQ(cm.at(i, 2), 0u);
    EXPECT_EQ(cm.at(i, 1), cm.row_sum(i));
  }
}

TEST(Evaluate, BatchSizeDoesNotChangePredictions) {
  auto t = toy_problem();
  Model<double> m(t.cfg);
  EXPECT_EQ(predict(m, t.data, t.split.test, 7), predict(m, t.data, t.split.test, 128));
}

TEST(Train, SingleSampleOverfits) {
  auto t = toy_problem();
  Model<double> m(t.cfg);
  TrainConfig tc;
  tc.epochs = 21;
  tc.batch = 4;
  tc.adam.lr = 1e-3;
  const std::vector<std::size_t> one{t.split.train[0]};
  const auto h = train(m, t.data, one, tc);
  ASSERT_EQ(h.size(), 21u);
  for (std::size_t e = 1; e < h.size(); ++e) EXPECT_LT(h[e].loss, h[e - 1].loss) << "epoch " << e + 1;
}

TEST(Train, ZeroLearningRateKeepsParamsBitIdentical) {
  auto t = toy_problem();
  Model<double> m(t.cfg);
  const auto before = m.params();
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch = 8;
  tc.adam.lr = 0;
  train(m, t.data, t.split.train, tc);
  EXPECT_EQ(m.params(), before);
}

TEST(Train, DeterministicUnderSeed) {
  auto t = toy_problem();
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch = 8;
  tc.adam.lr = 1e-3;
  Model<double> a(t.cfg), b(t.cfg);
  const auto ha = train(a, t.data, t.split.train, tc), hb = train(b, t.data, t.split.train, tc);
  EXPECT_EQ(history_csv(ha), history_csv(hb));
  EXPECT_EQ(a.params(), b.params());
  Model<double> c(t.cfg);
  tc.seed = 7;
  train(c, t.data, t.split.train, tc);
  EXPECT_FALSE(c.params() == a.params());
}

TEST(Train, LossDropsOnSmallSubset) {
  auto t = toy_problem();
  ASSERT_GE(t.split.train.size() + t.split.test.size(), 32u);
  std::vector<std::size_t> px(t.split.train);
  for (std::size_t i = 0; px.size() < 32; ++i) px.push_back(t.split.test[i]);
  px.resize(32);
  Model<double> m(t.cfg);
  const double initial = mean_loss(m, t.data, px);
  TrainConfig tc;
  tc.epochs = 50;
  tc.batch = 8;
  tc.adam.lr = 1e-3;
  train(m, t.data, px, tc);
  const double final_loss = mean_loss(m, t.data, px);
  EXPECT_LT(final_loss, 0.2 * initial) << "initial " << initial << " final " << final_loss;
}

TEST(Train, NonFiniteLossAborts) {
  auto t = toy_problem();
  Model<double> m(t.cfg);
  m.params().get("head.fc2.b")[0] = std::nan("");
  TrainConfig tc;
  tc.epochs = 1;
  try {
    train(m, t.data, t.split.train, tc);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsBadInputs) {
  auto t = toy_problem();
  Model<double> m(t.cfg);
  TrainConfig tc;
  EXPECT_THROW(train(m, t.data, {}, tc), Error);
  tc.batch = 0;
  EXPECT_THROW(train(m, t.data, t.split.train, tc), Error);
}

TEST(Train, HistoryCsv) {
  const History h{{1, 0.5, 0.25}, {2, 0.125, 1.0}};
  EXPECT_EQ(history_csv(h), "epoch,loss,train_oa\n1,0.5,0.25\n2,0.125,1\n");
}

TEST(Train, CosineScheduleReachesSmallerSteps) {
  auto t = toy_problem();
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch = 8;
  tc.adam.lr = 1e-3;
  Model<double> a(t.cfg), b(t.cfg);
  train(a, t.data, t.split.train, tc);
  tc.schedule = Schedule::cosine;
  train(b, t.data, t.split.train, tc);
  EXPECT_FALSE(a.params() == b.params());
}
