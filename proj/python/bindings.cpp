#include <sstream>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "texroi/cli.hpp"
#include "texroi/error.hpp"
#include "texroi/experiment.hpp"
#include "texroi/folds.hpp"
#include "texroi/gbm.hpp"
#include "texroi/lbp.hpp"
#include "texroi/metrics.hpp"
#include "texroi/report.hpp"
#include "texroi/synth.hpp"

namespace py = pybind11;
using namespace texroi;

namespace {

using Array2 = py::array_t<double, py::array::c_style | py::array::forcecast>;

ImageGrid to_grid(const Array2& a, double spacing = 1.0) {
  if (a.ndim() != 2) throw Error(ErrorKind::Invalid, "expected a 2-D array");
  const auto h = static_cast<int>(a.shape(0)), w = static_cast<int>(a.shape(1));
  return ImageGrid(w, h, spacing, std::vector<double>(a.data(), a.data() + a.size()));
}

FeatureMatrix to_matrix(const Array2& a) {
  if (a.ndim() != 2) throw Error(ErrorKind::Invalid, "expected a 2-D feature array");
  FeatureMatrix m(a.shape(0), a.shape(1));
  auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = r(i, j);
  return m;
}

PredictionSet predictions(std::vector<double> scores, std::vector<int> labels) {
  PredictionSet p;
  p.scores = std::move(scores);
  p.labels = std::move(labels);
  return p;
}

LbpConfig lbp_config(double radius, int neighbors, int bins) {
  LbpConfig c{radius, neighbors, bins, TieRule::Geq};
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Patellar texture ROI pipeline: LBP, boosting, metrics, folds, synthetic cohorts, experiments";

  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      PyErr_SetString(PyExc_ValueError, (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
    }
  });

  m.def(
      "lbp_code",
      [](const Array2& image, int x, int y, double radius, int neighbors) {
        return lbp_code(to_grid(image), x, y, lbp_config(radius, neighbors, 1 << std::min(neighbors, 8)));
      },
      py::arg("image"), py::arg("x"), py::arg("y"), py::arg("radius") = 2.0, py::arg("neighbors") = 8,
      "LBP code at column x, row y.");

  m.def(
      "lbp_histogram",
      [](const Array2& image, double radius, int neighbors, int bins, bool normalize) {
        RoiPatch patch;
        patch.pixels = to_grid(image);
        return lbp_histogram(patch, lbp_config(radius, neighbors, bins), normalize).values;
      },
      py::arg("image"), py::arg("radius") = 2.0, py::arg("neighbors") = 8, py::arg("bins") = 256,
      py::arg("normalize") = true, "Histogram of LBP codes over every valid center.");

  m.def(
      "roc_auc", [](std::vector<double> s, std::vector<int> y) { return roc_auc(s, y); }, py::arg("scores"),
      py::arg("labels"));
  m.def(
      "average_precision", [](std::vector<double> s, std::vector<int> y) { return average_precision(s, y); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "brier", [](std::vector<double> s, std::vector<int> y) { return brier(s, y); }, py::arg("scores"),
      py::arg("labels"));
  m.def(
      "delong_test",
      [](std::vector<double> a, std::vector<double> b, std::vector<int> y) {
        const auto r = delong_test(predictions(std::move(a), y), predictions(std::move(b), y));
        py::dict d;
        d["auc_a"] = r.auc_a;
        d["auc_b"] = r.auc_b;
        d["z"] = r.z;
        d["p_value"] = r.p_value;
        return d;
      },
      py::arg("scores_a"), py::arg("scores_b"), py::arg("labels"), "Paired DeLong test of two AUCs.");

  m.def(
      "stratified_subject_kfold",
      [](const std::vector<std::string>& knee_ids, const std::vector<std::string>& subject_ids,
         const std::vector<int>& labels, int k, std::uint64_t seed) {
        if (knee_ids.size() != subject_ids.size() || knee_ids.size() != labels.size())
          throw Error(ErrorKind::Invalid, "knee_ids, subject_ids and labels differ in length");
        std::vector<FoldItem> items;
        for (std::size_t i = 0; i < knee_ids.size(); ++i) items.push_back({knee_ids[i], subject_ids[i], labels[i]});
        const auto folds = stratified_subject_kfold(items, k, seed);
        std::vector<int> out;
        for (const auto& id : knee_ids) out.push_back(folds.fold(id));
        return out;
      },
      py::arg("knee_ids"), py::arg("subject_ids"), py::arg("labels"), py::arg("k") = 5, py::arg("seed") = 0,
      "Fold index per knee; knees of one subject share a fold.");

  m.def(
      "train_gbm",
      [](const Array2& x, const std::vector<int>& y, int n_trees, int max_leaves, int min_samples_leaf,
         double learning_rate, double l2_reg) {
        GbmConfig cfg;
        cfg.n_trees = n_trees;
        cfg.max_leaves = max_leaves;
        cfg.min_samples_leaf = min_samples_leaf;
        cfg.learning_rate = learning_rate;
        cfg.l2_reg = l2_reg;
        return serialize_gbm(train_gbm(to_matrix(x), y, cfg));
      },
      py::arg("x"), py::arg("y"), py::arg("n_trees") = 200, py::arg("max_leaves") = 31,
      py::arg("min_samples_leaf") = 20, py::arg("learning_rate") = 0.1, py::arg("l2_reg") = 1.0,
      "Trains a boosted tree model and returns it as JSON text.");
  m.def(
      "predict_gbm",
      [](const std::string& model, const Array2& x) { return predict_gbm(deserialize_gbm(model), to_matrix(x)); },
      py::arg("model"), py::arg("x"), "Probabilities from a JSON model.");

  m.def(
      "generate_cohort",
      [](const std::filesystem::path& out_dir, int n_subjects, double texture_effect, double clinical_effect,
         double prevalence, int image_size, std::uint64_t seed) {
        SynthConfig cfg;
        cfg.n_subjects = n_subjects;
        cfg.texture_effect = texture_effect;
        cfg.clinical_effect = clinical_effect;
        cfg.prevalence = prevalence;
        cfg.image_size = image_size;
        cfg.seed = seed;
        return generate_cohort(cfg, out_dir);
      },
      py::arg("out_dir"), py::arg("n_subjects") = 100, py::arg("texture_effect") = 1.0,
      py::arg("clinical_effect") = 1.0, py::arg("prevalence") = 0.173, py::arg("image_size") = 300,
      py::arg("seed") = 0, "Writes a synthetic cohort and returns the manifest path.");

  m.def(
      "run_experiment",
      [](const std::filesystem::path& config) {
        ExperimentResult res;
        {
          py::gil_scoped_release release;
          res = run_experiment(load_experiment_config(config));
        }
        py::dict d;
        d["report"] = res.has_report ? py::str(report_to_json(res.report)) : py::str("");
        d["failures"] = res.failures;
        return d;
      },
      py::arg("config"), "Runs an experiment config; returns report JSON text and per-model failures.");

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli_main(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool; returns (exit code, stdout, stderr).");
}
