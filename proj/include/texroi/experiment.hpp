#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "texroi/cnn.hpp"
#include "texroi/dataset.hpp"
#include "texroi/folds.hpp"
#include "texroi/gbm.hpp"
#include "texroi/image.hpp"
#include "texroi/lbp.hpp"
#include "texroi/metrics.hpp"
#include "texroi/report.hpp"
#include "texroi/roi.hpp"

namespace texroi {

enum class ModelKind {
  Lbp,          // model1: LBP histogram -> GBM
  Demographic,  // model2: age, sex, BMI
  Womac,        // model3: + WOMAC
  Kl,           // model4: age, sex, BMI + KL
  WomacKl,      // model5: + WOMAC + KL
  Cnn,          // model6: CNN on a resized ROI
  Fused,        // model7: LBP + all clinical columns
  Stacked,      // model8: GBM over model5 and model6 out-of-fold predictions
};

struct ModelSpec {
  std::string id;    // model1..model8
  std::string name;  // output name, defaults to id
  ModelKind kind = ModelKind::Lbp;
  std::optional<RoiKind> roi;  // overrides the experiment ROI for model1, 6 and 7

  static ModelSpec parse(const std::string& id);
};

/// Clinical column names in manifest order.
const std::vector<std::string>& clinical_columns();
/// Clinical inputs of a model kind (empty for LBP, CNN and stacked models).
std::vector<std::string> clinical_inputs(ModelKind kind);

struct ExperimentConfig {
  std::filesystem::path dataset;
  std::filesystem::path output_dir;
  double pixel_spacing = 0.2;  // native spacing of the manifest's images, mm
  PreprocessConfig preprocess;
  RoiKind roi_kind = RoiKind::Superior;
  RoiConfig roi;
  LbpConfig lbp;
  int folds = 5;
  std::optional<std::uint64_t> fold_seed;  // defaults to seed
  std::uint64_t seed = 0;
  GbmConfig gbm;
  GbmConfig stack_gbm;
  CnnConfig cnn;
  TrainConfig cnn_train;
  RoiKind cnn_roi = RoiKind::Superior;
  double cnn_val_fraction = 0.1;
  std::vector<ModelSpec> models;
  CiMethod ci_method = CiMethod::Bootstrap;
  int n_boot = 2000;
  int threads = 1;
  bool save_models = true;
  std::optional<std::filesystem::path> dump_preprocessed;

  std::uint64_t effective_fold_seed() const { return fold_seed.value_or(seed); }
};

/// Parses an experiment JSON document; relative paths resolve against
/// `base_dir`. Unknown keys are rejected.
ExperimentConfig parse_experiment_config(const std::string& json_text,
                                         const std::filesystem::path& base_dir);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Named feature columns keyed by knee id, rows in knee order.
struct FeatureTable {
  std::vector<std::string> knee_ids;
  std::vector<std::string> schema;
  FeatureMatrix values;
};

FeatureTable clinical_features(const Dataset& ds, const std::vector<std::string>& columns);

/// Row-wise concatenation: LBP columns then clinical columns. Rows are
/// matched by knee id and emitted in the order of `lbp`.
FeatureTable fuse_features(const FeatureTable& lbp, const FeatureTable& clinical);

/// One knee after preprocessing and alignment.
struct PreparedKnee {
  AlignedKnee aligned;
  double patella_height_px = 0.0;
};

/// Load, truncate/normalize, resample, mirror right knees and align.
PreparedKnee prepare_knee(const KneeSample& knee, const ExperimentConfig& cfg);

struct FeatureStore {
  std::vector<std::string> knee_ids;
  std::map<RoiKind, FeatureTable> lbp;
  std::map<RoiKind, ImageBatch> cnn_patches;  // knee order, cnn.input_size square
};

/// Computes LBP histograms and resized CNN input patches for the requested
/// ROI kinds. Knees are processed in parallel with `cfg.threads` workers;
/// results do not depend on the worker count.
FeatureStore extract_features(const Dataset& ds, const ExperimentConfig& cfg,
                              const std::set<RoiKind>& lbp_kinds, const std::set<RoiKind>& cnn_kinds = {});

struct OofPredictions {
  std::string name;
  std::vector<std::string> knee_ids;  // dataset order
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<int> source_fold;  // fold whose model produced the score
  std::uint64_t fold_hash = 0;

  PredictionSet prediction_set() const { return {knee_ids, scores, labels}; }
};

struct FoldRecord {
  int fold = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::size_t train_subjects = 0;
  int cnn_selected_epoch = -1;
  double cnn_val_auc = 0.0;
};

struct ModelRun {
  OofPredictions oof;
  std::vector<FoldRecord> folds;
};

struct RunOptions {
  int threads = 1;
  std::optional<std::filesystem::path> model_dir;  // per-fold model files
};

/// Out-of-fold GBM predictions: for each fold f, trains on the knees of all
/// other folds and predicts fold f. Throws Invalid if a training set would
/// contain a subject of the predicted fold.
ModelRun run_gbm_model(const std::string& name, const FeatureTable& features, const Dataset& ds,
                       const FoldAssignment& folds, const GbmConfig& cfg, const RunOptions& opt = {});

/// Out-of-fold CNN predictions. Each fold's training knees are split
/// subject-wise into training and validation parts for epoch selection.
ModelRun run_cnn_model(const std::string& name, const ImageBatch& patches, const Dataset& ds,
                       const FoldAssignment& folds, const CnnConfig& cnn, const TrainConfig& train,
                       double val_fraction, std::uint64_t seed, const RunOptions& opt = {});

/// Level-2 GBM over two level-1 out-of-fold prediction columns using the same
/// fold assignment. Throws Invalid when a level-1 set is incomplete or was not
/// produced out-of-fold under `folds`.
ModelRun stack_models(const std::string& name, const OofPredictions& a, const OofPredictions& b,
                      const Dataset& ds, const FoldAssignment& folds, const GbmConfig& cfg,
                      const RunOptions& opt = {});

/// DeLong test after matching knees by id.
DelongResult compare_models(const PredictionSet& a, const PredictionSet& b);

/// `knee_id,score,label` CSV.
void write_predictions(const std::filesystem::path& path, const PredictionSet& p);
PredictionSet read_predictions(const std::filesystem::path& path);

struct ExperimentResult {
  std::vector<ModelRun> runs;  // completed models in run order, dependencies included
  std::map<std::string, std::string> failures;  // model name -> error
  FoldAssignment folds;
  EvalReport report;
  bool has_report = false;
};

/// Runs every configured model and writes predictions/<name>.csv as each
/// model completes, folds.csv, models/ and the report files under
/// cfg.output_dir. A failing model is recorded and the rest still run.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

}  // namespace texroi
