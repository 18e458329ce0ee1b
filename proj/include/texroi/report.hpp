#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "texroi/metrics.hpp"

namespace texroi {

enum class CiMethod { Bootstrap, FoldT };

const char* to_string(CiMethod m) noexcept;
CiMethod ci_method_from_string(const std::string& name);

/// Pooled out-of-fold predictions of one model; `folds` holds each knee's
/// fold index (needed by the per-fold interval only).
struct NamedPredictions {
  std::string name;
  PredictionSet predictions;
  std::vector<int> folds;
};

struct ReportOptions {
  CiMethod ci_method = CiMethod::Bootstrap;
  int n_boot = 2000;
  double level = 0.95;
  std::uint64_t seed = 0;
  int fold_k = 0;
  std::uint64_t fold_seed = 0;
  std::uint64_t fold_hash = 0;
};

struct ModelReport {
  std::string name;
  std::size_t n = 0;
  std::size_t positives = 0;
  double auc = 0.0;
  Interval auc_ci;
  double ap = 0.0;
  Interval ap_ci;
  double brier = 0.0;
};

struct PairwiseComparison {
  std::string a;
  std::string b;
  DelongResult result;
};

struct EvalReport {
  int fold_k = 0;
  std::uint64_t fold_seed = 0;
  std::string fold_hash;  // 16 hex digits
  std::string ci_method;
  int n_boot = 0;
  double ci_level = 0.95;
  std::uint64_t ci_seed = 0;
  std::size_t n_knees = 0;
  double prevalence = 0.0;
  std::vector<ModelReport> models;
  std::vector<PairwiseComparison> comparisons;  // every pair, in model order

  const ModelReport& model(const std::string& name) const;
};

/// Per-model AUC, AP (with intervals) and Brier plus the pairwise DeLong
/// matrix. All prediction sets must cover the same knees in the same order.
EvalReport build_report(const std::vector<NamedPredictions>& models, const ReportOptions& opt);

/// Deterministic JSON (fixed key order, no timestamps).
std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

/// Writes report.json, curves/<model>_roc.csv, curves/<model>_pr.csv,
/// curves/roc.svg and curves/pr.svg under `dir`.
void write_report(const std::filesystem::path& dir, const EvalReport& report,
                  const std::vector<NamedPredictions>& models);

std::string hex64(std::uint64_t v);

}  // namespace texroi
