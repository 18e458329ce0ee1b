#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace texroi {

/// Paired scores and labels for one model, optionally keyed by knee id.
struct PredictionSet {
  std::vector<std::string> knee_ids;
  std::vector<double> scores;
  std::vector<int> labels;

  /// Throws Invalid on length mismatch, scores outside [0,1] or labels not 0/1.
  void validate() const;
  std::size_t positives() const;
};

/// Mann-Whitney estimate: (wins + ties/2) / (n_pos * n_neg).
double roc_auc(std::span<const double> scores, std::span<const int> labels);
inline double roc_auc(const PredictionSet& p) { return roc_auc(p.scores, p.labels); }

/// Step-wise average precision over unique descending score thresholds.
double average_precision(std::span<const double> scores, std::span<const int> labels);
inline double average_precision(const PredictionSet& p) {
  return average_precision(p.scores, p.labels);
}

/// Mean squared error between scores and labels.
double brier(std::span<const double> scores, std::span<const int> labels);
inline double brier(const PredictionSet& p) { return brier(p.scores, p.labels); }

struct DelongResult {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double z = 0.0;
  double p_value = 1.0;
};

/// DeLong's test for two correlated AUCs on the same cases. Inputs must share
/// knee ids (when present) and labels.
DelongResult delong_test(const PredictionSet& a, const PredictionSet& b);

enum class Metric { Auc, Ap };

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile interval over class-stratified resamples with replacement.
Interval bootstrap_ci(const PredictionSet& p, Metric metric, int n_boot = 2000, double level = 0.95,
                      std::uint64_t seed = 0);

/// Mean +/- Student-t half-width over per-fold metric values.
Interval fold_t_interval(std::span<const double> per_fold, double level = 0.95);

enum class CurveKind { Roc, Pr };

struct CurveData {
  CurveKind kind = CurveKind::Roc;
  std::vector<std::pair<double, double>> points;  // (fpr, tpr) or (recall, precision)
  double area = 0.0;  // trapezoid for ROC, step rule for PR
};

CurveData roc_curve(const PredictionSet& p);
CurveData pr_curve(const PredictionSet& p);

/// CSV with header `fpr,tpr` or `recall,precision`.
void write_curve_csv(const std::filesystem::path& path, const CurveData& curve);

/// Line plot of one or more labelled curves with the dashed chance baseline
/// (ROC diagonal, or the horizontal line at `prevalence` for PR).
void write_curve_svg(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, CurveData>>& curves,
                     double prevalence);

/// Standard normal CDF.
double normal_cdf(double z);

}  // namespace texroi
