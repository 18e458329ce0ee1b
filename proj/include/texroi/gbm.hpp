#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

namespace texroi {

using FeatureMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct GbmConfig {
  int n_trees = 200;
  int max_leaves = 31;
  int min_samples_leaf = 20;
  double learning_rate = 0.1;
  double l2_reg = 1.0;
  int feature_bins = 255;
  std::uint64_t seed = 0;  // reserved: training draws no random numbers

  void validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;   // taken when x[feature] <= threshold
  int right = -1;
  double value = 0.0;  // leaf log-odds increment

  bool is_leaf() const noexcept { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // root at index 0

  double predict(const double* row) const;
  int leaf_count() const;
};

struct GbmModel {
  double base_score = 0.0;  // log-odds
  std::vector<Tree> trees;
  std::vector<std::string> feature_schema;

  /// base_score plus the sum of tree outputs, one per row.
  std::vector<double> predict_logit(const FeatureMatrix& features) const;
};

/// Equal-frequency cut points per feature. A value falls in bin b when it is
/// <= cuts[b] and greater than cuts[b-1]; values above the last cut land in
/// the final bin. Cuts are actual training values, so ties collapse bins.
struct FeatureBinning {
  std::vector<std::vector<double>> cuts;

  static FeatureBinning fit(const FeatureMatrix& features, int max_bins);
  int bin_of(int feature, double value) const;
};

/// Newton-boosted trees on binary log-loss, grown leaf-wise by best gain.
/// Equal gains (within 1e-10 relative) resolve to the lowest feature index,
/// then the lowest bin.
/// `loss_trace`, when given, receives the training log-loss before the first
/// tree and after every tree.
GbmModel train_gbm(const FeatureMatrix& features, std::span<const int> labels,
                   const GbmConfig& cfg, std::vector<std::string> feature_schema = {},
                   std::vector<double>* loss_trace = nullptr);

/// Probabilities sigmoid(logit), kept strictly inside (0, 1).
std::vector<double> predict_gbm(const GbmModel& model, const FeatureMatrix& features);

/// Mean binary log-loss of probabilities against labels.
double log_loss(std::span<const double> probabilities, std::span<const int> labels);

double sigmoid(double z) noexcept;

inline constexpr int kGbmFormatVersion = 1;

/// JSON document {version, base_score, feature_schema, trees}; each tree is an
/// array of nodes {f, t, l, r} or {leaf}.
std::string serialize_gbm(const GbmModel& model);
GbmModel deserialize_gbm(std::string_view json);

}  // namespace texroi
