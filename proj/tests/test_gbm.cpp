#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gbm_oracle.hpp"
#include "texroi/error.hpp"
#include "texroi/gbm.hpp"
#include "texroi/metrics.hpp"

using namespace texroi;
using namespace texroi::test;

namespace {

struct Data {
  FeatureMatrix x;
  std::vector<int> y;
};

/// Labels from a noisy logistic model on the first two columns.
Data logistic_data(int n, int d, std::mt19937_64& rng, double noise = 1.0) {
  std::normal_distribution<double> nd;
  Data out{FeatureMatrix(n, d), std::vector<int>(static_cast<std::size_t>(n))};
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) out.x(i, j) = nd(rng);
    const double z = 1.5 * out.x(i, 0) - out.x(i, std::min(1, d - 1)) + noise * nd(rng);
    out.y[static_cast<std::size_t>(i)] = z > 0 ? 1 : 0;
  }
  out.y[0] = 1;
  out.y[1] = 0;
  return out;
}

}  // namespace

TEST(GbmConfigTest, Validation) {
  GbmConfig c;
  EXPECT_NO_THROW(c.validate());
  c.max_leaves = 1;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.min_samples_leaf = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.l2_reg = -1.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(GbmBinning, CutsAreTrainingValuesAndBinsAreMonotone) {
  std::mt19937_64 rng(3);
  const auto d = logistic_data(500, 2, rng);
  const auto fb = FeatureBinning::fit(d.x, 16);
  ASSERT_EQ(fb.cuts.size(), 2u);
  for (const auto& cuts : fb.cuts) {
    EXPECT_LE(cuts.size(), 15u);
    EXPECT_TRUE(std::is_sorted(cuts.begin(), cuts.end()));
  }
  for (int i = 0; i < 499; ++i) {
    const int a = fb.bin_of(0, d.x(i, 0)), b = fb.bin_of(0, d.x(i + 1, 0));
    if (d.x(i, 0) < d.x(i + 1, 0)) EXPECT_LE(a, b);
  }
  // value equal to a cut lands in that cut's bin
  EXPECT_EQ(fb.bin_of(0, fb.cuts[0][3]), 3);
}

TEST(GbmBinning, FewDistinctValuesGetOneBinEach) {
  FeatureMatrix x(6, 1);
  x << 3, 1, 2, 1, 3, 2;
  const auto fb = FeatureBinning::fit(x, 255);
  EXPECT_EQ(fb.cuts[0], (std::vector<double>{1, 2}));
  EXPECT_EQ(fb.bin_of(0, 1), 0);
  EXPECT_EQ(fb.bin_of(0, 2), 1);
  EXPECT_EQ(fb.bin_of(0, 3), 2);
  EXPECT_EQ(fb.bin_of(0, 99), 2);
}

TEST(GbmTrain, LossIsNonIncreasing) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    std::mt19937_64 rng(100 + s);
    const auto d = logistic_data(200, 4, rng);
    GbmConfig cfg;
    cfg.n_trees = 50;
    cfg.min_samples_leaf = 5;
    std::vector<double> trace;
    train_gbm(d.x, d.y, cfg, {}, &trace);
    ASSERT_EQ(trace.size(), 51u);
    for (std::size_t t = 1; t < trace.size(); ++t) EXPECT_LE(trace[t], trace[t - 1] + 1e-9);
  }
}

TEST(GbmTrain, FirstSplitMatchesExhaustiveOracle) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u;
  for (int inst = 0; inst < 30; ++inst) {
    FeatureMatrix x(10, 3);
    std::vector<int> y(10);
    for (int i = 0; i < 10; ++i) {
      for (int j = 0; j < 3; ++j) x(i, j) = u(rng);
      y[static_cast<std::size_t>(i)] = i < 4 ? 1 : 0;
    }
    std::shuffle(y.begin(), y.end(), rng);
    GbmConfig cfg;
    cfg.n_trees = 1;
    cfg.max_leaves = 2;
    cfg.min_samples_leaf = 1;
    const auto model = train_gbm(x, y, cfg);
    const auto want = exhaustive_first_split(x, y, cfg.l2_reg, cfg.min_samples_leaf);
    const auto& root = model.trees.at(0).nodes.at(0);
    ASSERT_GE(want.feature, 0);
    EXPECT_EQ(root.feature, want.feature) << "instance " << inst;
    EXPECT_EQ(root.threshold, want.threshold) << "instance " << inst;
  }
}

TEST(GbmTrain, SeparableDataReachesPerfectTrainingAuc) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  FeatureMatrix x(100, 2);
  std::vector<int> y(100);
  for (int i = 0; i < 100; ++i) {
    y[static_cast<std::size_t>(i)] = i % 3 == 0;
    x(i, 0) = nd(rng);
    x(i, 1) = (y[static_cast<std::size_t>(i)] ? 1.0 : -1.0) + 0.2 * nd(rng) * 0.5;
  }
  const auto model = train_gbm(x, y, GbmConfig{});
  EXPECT_EQ(roc_auc(predict_gbm(model, x), y), 1.0);
}

TEST(GbmTrain, LeafCountAndMinSamplesRespected) {
  std::mt19937_64 rng(11);
  const auto d = logistic_data(300, 3, rng);
  GbmConfig cfg;
  cfg.n_trees = 5;
  cfg.max_leaves = 6;
  cfg.min_samples_leaf = 30;
  const auto model = train_gbm(d.x, d.y, cfg);
  ASSERT_EQ(model.trees.size(), 5u);
  for (const auto& tree : model.trees) {
    EXPECT_LE(tree.leaf_count(), 6);
    std::vector<int> hits(tree.nodes.size(), 0);
    for (int i = 0; i < 300; ++i) {
      int n = 0;
      while (!tree.nodes[static_cast<std::size_t>(n)].is_leaf()) {
        const auto& node = tree.nodes[static_cast<std::size_t>(n)];
        n = d.x(i, node.feature) <= node.threshold ? node.left : node.right;
      }
      ++hits[static_cast<std::size_t>(n)];
    }
    for (std::size_t k = 0; k < tree.nodes.size(); ++k)
      if (tree.nodes[k].is_leaf()) EXPECT_GE(hits[k], 30);
  }
}

TEST(GbmTrain, BaseScoreIsPriorLogOdds) {
  std::mt19937_64 rng(2);
  const auto d = logistic_data(50, 2, rng);
  double pos = 0;
  for (int v : d.y) pos += v;
  GbmConfig cfg;
  cfg.n_trees = 1;
  const auto model = train_gbm(d.x, d.y, cfg);
  EXPECT_NEAR(model.base_score, std::log(pos / (50.0 - pos)), 1e-12);
}

TEST(GbmTrain, ConstantFeaturesGiveConstantPrediction) {
  FeatureMatrix x = FeatureMatrix::Constant(20, 2, 1.0);
  std::vector<int> y(20, 0);
  for (int i = 0; i < 5; ++i) y[static_cast<std::size_t>(i)] = 1;
  const auto model = train_gbm(x, y, GbmConfig{});
  const auto p = predict_gbm(model, x);
  for (double v : p) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(GbmTrain, RejectsBadInput) {
  FeatureMatrix x(4, 1);
  x << 1, 2, 3, 4;
  EXPECT_THROW(train_gbm(x, std::vector<int>{1, 1, 1, 1}, GbmConfig{}), Error);
  EXPECT_THROW(train_gbm(x, std::vector<int>{1, 0, 1}, GbmConfig{}), Error);
  EXPECT_THROW(train_gbm(x, std::vector<int>{1, 0, 2, 0}, GbmConfig{}), Error);
  EXPECT_THROW(train_gbm(x, std::vector<int>{1, 0, 1, 0}, GbmConfig{}, {"a", "b"}), Error);
  x(0, 0) = NAN;
  EXPECT_THROW(train_gbm(x, std::vector<int>{1, 0, 1, 0}, GbmConfig{}), Error);
}

TEST(GbmTrain, PredictionsAreProbabilitiesAndDeterministic) {
  std::mt19937_64 rng(5);
  const auto d = logistic_data(120, 3, rng);
  const auto a = train_gbm(d.x, d.y, GbmConfig{});
  const auto b = train_gbm(d.x, d.y, GbmConfig{});
  const auto pa = predict_gbm(a, d.x), pb = predict_gbm(b, d.x);
  EXPECT_EQ(pa, pb);
  for (double p : pa) {
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
}

TEST(GbmSerialization, RoundTripPreservesPredictions) {
  std::mt19937_64 rng(8);
  const auto d = logistic_data(150, 3, rng);
  GbmConfig cfg;
  cfg.n_trees = 20;
  const auto model = train_gbm(d.x, d.y, cfg, {"a", "b", "c"});
  const auto back = deserialize_gbm(serialize_gbm(model));
  EXPECT_EQ(back.feature_schema, model.feature_schema);
  EXPECT_EQ(back.trees.size(), model.trees.size());
  EXPECT_EQ(predict_gbm(back, d.x), predict_gbm(model, d.x));
  EXPECT_EQ(serialize_gbm(back), serialize_gbm(model));
}

TEST(GbmSerialization, RejectsCorruptDocuments) {
  EXPECT_THROW(deserialize_gbm("not json"), Error);
  EXPECT_THROW(deserialize_gbm(R"({"version": 99, "base_score": 0, "feature_schema": [], "trees": []})"),
               Error);
  EXPECT_THROW(deserialize_gbm(R"({"version": 1, "base_score": 0, "feature_schema": ["a"],
                                    "trees": [[{"f": 0, "t": 1.0, "l": 7, "r": 2}]]})"),
               Error);
}
