#include "texroi/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "texroi/error.hpp"
#include "texroi/log.hpp"

#include <spdlog/spdlog.h>

namespace texroi {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Model specs

ModelSpec ModelSpec::parse(const std::string& id) {
  static const std::map<std::string, ModelKind> kinds = {
      {"model1", ModelKind::Lbp},     {"model2", ModelKind::Demographic}, {"model3", ModelKind::Womac},
      {"model4", ModelKind::Kl},      {"model5", ModelKind::WomacKl},     {"model6", ModelKind::Cnn},
      {"model7", ModelKind::Fused},   {"model8", ModelKind::Stacked}};
  const auto it = kinds.find(id);
  if (it == kinds.end()) throw Error(ErrorKind::Invalid, "unknown model '" + id + "' (model1..model8)");
  return {id, id, it->second, std::nullopt};
}

const std::vector<std::string>& clinical_columns() {
  static const std::vector<std::string> cols = {"age", "sex", "bmi", "womac", "kl"};
  return cols;
}

std::vector<std::string> clinical_inputs(ModelKind kind) {
  switch (kind) {
    case ModelKind::Demographic: return {"age", "sex", "bmi"};
    case ModelKind::Womac: return {"age", "sex", "bmi", "womac"};
    case ModelKind::Kl: return {"age", "sex", "bmi", "kl"};
    case ModelKind::WomacKl:
    case ModelKind::Fused: return clinical_columns();
    default: return {};
  }
}

// ---------------------------------------------------------------------------
// Config parsing

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw Error(ErrorKind::Parse, where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw Error(ErrorKind::Parse, "unknown key '" + key + "' in " + where);
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

GbmConfig parse_gbm(const json& j, GbmConfig g, const std::string& where) {
  check_keys(j, where, {"n_trees", "max_leaves", "min_samples_leaf", "learning_rate", "l2_reg", "feature_bins", "seed"});
  read(j, "n_trees", g.n_trees);
  read(j, "max_leaves", g.max_leaves);
  read(j, "min_samples_leaf", g.min_samples_leaf);
  read(j, "learning_rate", g.learning_rate);
  read(j, "l2_reg", g.l2_reg);
  read(j, "feature_bins", g.feature_bins);
  read(j, "seed", g.seed);
  g.validate();
  return g;
}

RoiWidthMode width_mode_from_string(const std::string& s) {
  if (s == "bbox") return RoiWidthMode::BoundingBox;
  if (s == "square") return RoiWidthMode::Square;
  throw Error(ErrorKind::Invalid, "unknown roi width mode '" + s + "' (bbox|square)");
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("experiment config is not valid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  try {
    check_keys(j, "experiment config",
               {"dataset", "output_dir", "pixel_spacing", "seed", "threads", "save_models", "dump_preprocessed",
                "preprocess", "roi", "lbp", "folds", "gbm", "stack_gbm", "cnn", "models", "metrics"});
    if (!j.contains("dataset")) throw Error(ErrorKind::Parse, "experiment config needs 'dataset'");
    cfg.dataset = resolve(base_dir, j.at("dataset").get<std::string>());
    cfg.output_dir = resolve(base_dir, j.value("output_dir", std::string("out")));
    read(j, "pixel_spacing", cfg.pixel_spacing);
    read(j, "seed", cfg.seed);
    read(j, "threads", cfg.threads);
    read(j, "save_models", cfg.save_models);
    if (j.contains("dump_preprocessed"))
      cfg.dump_preprocessed = resolve(base_dir, j.at("dump_preprocessed").get<std::string>());
    if (!(cfg.pixel_spacing > 0.0)) throw Error(ErrorKind::Invalid, "pixel_spacing must be positive");
    if (cfg.threads < 1) throw Error(ErrorKind::Invalid, "threads must be at least 1");

    if (j.contains("preprocess")) {
      const auto& p = j.at("preprocess");
      check_keys(p, "preprocess", {"lo_pct", "hi_pct", "target_spacing", "order"});
      read(p, "lo_pct", cfg.preprocess.lo_pct);
      read(p, "hi_pct", cfg.preprocess.hi_pct);
      read(p, "target_spacing", cfg.preprocess.target_spacing);
      if (p.contains("order")) {
        const auto o = p.at("order").get<std::string>();
        if (o == "truncate_first") cfg.preprocess.order = NormalizationOrder::TruncateFirst;
        else if (o == "normalize_first") cfg.preprocess.order = NormalizationOrder::NormalizeFirst;
        else throw Error(ErrorKind::Invalid, "unknown preprocess order '" + o + "'");
      }
    }
    if (j.contains("roi")) {
      const auto& r = j.at("roi");
      check_keys(r, "roi", {"kind", "height_fraction", "width_mode", "spline_smoothing", "boundary_samples"});
      if (r.contains("kind")) cfg.roi_kind = roi_kind_from_string(r.at("kind").get<std::string>());
      read(r, "height_fraction", cfg.roi.height_fraction);
      if (r.contains("width_mode")) cfg.roi.width_mode = width_mode_from_string(r.at("width_mode").get<std::string>());
      read(r, "spline_smoothing", cfg.roi.spline_smoothing);
      read(r, "boundary_samples", cfg.roi.boundary_samples);
    }
    if (j.contains("lbp")) {
      const auto& l = j.at("lbp");
      check_keys(l, "lbp", {"profile", "radius", "neighbors", "bins", "tie_rule"});
      if (l.contains("profile")) cfg.lbp = LbpConfig::from_profile(l.at("profile").get<std::string>());
      read(l, "radius", cfg.lbp.radius);
      read(l, "neighbors", cfg.lbp.neighbors);
      read(l, "bins", cfg.lbp.bins);
      if (l.contains("tie_rule")) {
        const auto t = l.at("tie_rule").get<std::string>();
        if (t == "geq") cfg.lbp.tie = TieRule::Geq;
        else if (t == "gt") cfg.lbp.tie = TieRule::Gt;
        else throw Error(ErrorKind::Invalid, "unknown tie rule '" + t + "' (geq|gt)");
      }
      cfg.lbp.validate();
    }
    if (j.contains("folds")) {
      const auto& f = j.at("folds");
      check_keys(f, "folds", {"k", "seed"});
      read(f, "k", cfg.folds);
      if (f.contains("seed")) cfg.fold_seed = f.at("seed").get<std::uint64_t>();
    }
    if (cfg.folds < 2) throw Error(ErrorKind::Invalid, "folds.k must be at least 2");
    if (j.contains("gbm")) cfg.gbm = parse_gbm(j.at("gbm"), cfg.gbm, "gbm");
    cfg.stack_gbm = j.contains("stack_gbm") ? parse_gbm(j.at("stack_gbm"), cfg.gbm, "stack_gbm") : cfg.gbm;
    if (j.contains("cnn")) {
      const auto& c = j.at("cnn");
      check_keys(c, "cnn",
                 {"input_size", "conv_channels", "fc_hidden", "dropout_rate", "bn_momentum", "bn_epsilon", "roi",
                  "val_fraction", "batch_size", "momentum", "weight_decay", "lr_initial", "lr_decay_factor",
                  "lr_decay_every", "epochs"});
      read(c, "input_size", cfg.cnn.input_size);
      if (c.contains("conv_channels")) {
        const auto ch = c.at("conv_channels").get<std::vector<int>>();
        if (ch.size() != 3) throw Error(ErrorKind::Invalid, "cnn.conv_channels needs three entries");
        std::copy(ch.begin(), ch.end(), cfg.cnn.conv_channels.begin());
      }
      read(c, "fc_hidden", cfg.cnn.fc_hidden);
      read(c, "dropout_rate", cfg.cnn.dropout_rate);
      read(c, "bn_momentum", cfg.cnn.bn_momentum);
      read(c, "bn_epsilon", cfg.cnn.bn_epsilon);
      if (c.contains("roi")) cfg.cnn_roi = roi_kind_from_string(c.at("roi").get<std::string>());
      read(c, "val_fraction", cfg.cnn_val_fraction);
      read(c, "batch_size", cfg.cnn_train.batch_size);
      read(c, "momentum", cfg.cnn_train.momentum);
      read(c, "weight_decay", cfg.cnn_train.weight_decay);
      read(c, "lr_initial", cfg.cnn_train.lr_initial);
      read(c, "lr_decay_factor", cfg.cnn_train.lr_decay_factor);
      read(c, "lr_decay_every", cfg.cnn_train.lr_decay_every);
      read(c, "epochs", cfg.cnn_train.epochs);
      cfg.cnn.validate();
      cfg.cnn_train.validate();
      if (!(cfg.cnn_val_fraction > 0.0 && cfg.cnn_val_fraction < 0.5))
        throw Error(ErrorKind::Invalid, "cnn.val_fraction must be in (0, 0.5)");
    }
    if (j.contains("models")) {
      for (const auto& m : j.at("models")) {
        if (m.is_string()) {
          cfg.models.push_back(ModelSpec::parse(m.get<std::string>()));
          continue;
        }
        check_keys(m, "models entry", {"id", "name", "roi"});
        auto spec = ModelSpec::parse(m.at("id").get<std::string>());
        read(m, "name", spec.name);
        if (m.contains("roi")) spec.roi = roi_kind_from_string(m.at("roi").get<std::string>());
        cfg.models.push_back(spec);
      }
    } else {
      for (int i = 1; i <= 8; ++i) cfg.models.push_back(ModelSpec::parse("model" + std::to_string(i)));
    }
    std::set<std::string> names;
    for (const auto& m : cfg.models) {
      if (!names.insert(m.name).second) throw Error(ErrorKind::Invalid, "duplicate model name '" + m.name + "'");
      if (m.name.empty() || m.name.front() == '_' || m.name.find_first_of("/\\") != std::string::npos)
        throw Error(ErrorKind::Invalid, "invalid model name '" + m.name + "'");
    }
    if (j.contains("metrics")) {
      const auto& m = j.at("metrics");
      check_keys(m, "metrics", {"ci_method", "n_boot"});
      if (m.contains("ci_method")) cfg.ci_method = ci_method_from_string(m.at("ci_method").get<std::string>());
      read(m, "n_boot", cfg.n_boot);
      if (cfg.n_boot < 100) throw Error(ErrorKind::Invalid, "metrics.n_boot must be at least 100");
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("experiment config: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read experiment config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str(), path.parent_path().empty() ? fs::path(".") : path.parent_path());
}

// ---------------------------------------------------------------------------
// Features

FeatureTable clinical_features(const Dataset& ds, const std::vector<std::string>& columns) {
  FeatureTable t;
  t.schema = columns;
  t.values.resize(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& c = ds[i].clinical;
    t.knee_ids.push_back(ds[i].knee_id);
    for (std::size_t k = 0; k < columns.size(); ++k) {
      const auto& name = columns[k];
      double v;
      if (name == "age") v = c.age;
      else if (name == "sex") v = c.sex;
      else if (name == "bmi") v = c.bmi;
      else if (name == "womac") v = c.womac;
      else if (name == "kl") v = c.kl;
      else throw Error(ErrorKind::Invalid, "unknown clinical column '" + name + "'");
      t.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = v;
    }
  }
  return t;
}

FeatureTable fuse_features(const FeatureTable& lbp, const FeatureTable& clinical) {
  std::map<std::string, Eigen::Index> row_of;
  for (std::size_t i = 0; i < clinical.knee_ids.size(); ++i)
    row_of.emplace(clinical.knee_ids[i], static_cast<Eigen::Index>(i));
  if (row_of.size() != lbp.knee_ids.size() || clinical.knee_ids.size() != lbp.knee_ids.size())
    throw Error(ErrorKind::Invalid, "fused feature tables cover different knees");
  FeatureTable t;
  t.knee_ids = lbp.knee_ids;
  t.schema = lbp.schema;
  t.schema.insert(t.schema.end(), clinical.schema.begin(), clinical.schema.end());
  const auto nl = lbp.values.cols(), nc = clinical.values.cols();
  t.values.resize(lbp.values.rows(), nl + nc);
  for (std::size_t i = 0; i < lbp.knee_ids.size(); ++i) {
    const auto it = row_of.find(lbp.knee_ids[i]);
    if (it == row_of.end()) throw Error(ErrorKind::Invalid, "knee '" + lbp.knee_ids[i] + "' has no clinical row");
    const auto r = static_cast<Eigen::Index>(i);
    t.values.row(r).head(nl) = lbp.values.row(r);
    t.values.row(r).tail(nc) = clinical.values.row(it->second);
  }
  return t;
}

PreparedKnee prepare_knee(const KneeSample& knee, const ExperimentConfig& cfg) {
  const auto raw = load_image(knee.image_path, cfg.pixel_spacing);
  auto lm = load_landmarks(knee.landmark_path);
  const auto img = preprocess(raw, knee.side, cfg.preprocess);
  lm = scale_landmarks(lm, cfg.pixel_spacing, cfg.preprocess.target_spacing);
  if (knee.side == Side::Right) lm = hflip_landmarks(lm, img.width());
  if (!landmarks_within(lm, img.width(), img.height()))
    throw Error(ErrorKind::Invalid, "landmarks fall outside the image");
  PreparedKnee out{align_patella(img, lm), 0.0};
  out.patella_height_px = patella_height_px(out.aligned.landmarks);
  return out;
}

namespace {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. The exception of
/// the lowest failing index is rethrown so failures are reproducible.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
  std::vector<std::exception_ptr> errors(n);
  const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(n))));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

FeatureStore extract_features(const Dataset& ds, const ExperimentConfig& cfg,
                              const std::set<RoiKind>& lbp_kinds, const std::set<RoiKind>& cnn_kinds) {
  cfg.lbp.validate();
  const auto n = ds.size();
  const int bins = cfg.lbp.bins;
  const int side = cfg.cnn.input_size;
  FeatureStore store;
  for (const auto& s : ds.samples()) store.knee_ids.push_back(s.knee_id);
  for (auto kind : lbp_kinds) {
    auto& t = store.lbp[kind];
    t.knee_ids = store.knee_ids;
    for (int b = 0; b < bins; ++b) t.schema.push_back("lbp_" + std::string(to_string(kind)) + "_" + std::to_string(b));
    t.values.resize(static_cast<Eigen::Index>(n), bins);
  }
  for (auto kind : cnn_kinds) store.cnn_patches.emplace(kind, ImageBatch(static_cast<int>(n), side));
  if (cfg.dump_preprocessed) fs::create_directories(*cfg.dump_preprocessed);

  parallel_for(n, cfg.threads, [&](std::size_t i) {
    const auto& knee = ds[i];
    try {
      const auto prepared = prepare_knee(knee, cfg);
      const auto& al = prepared.aligned;
      if (cfg.dump_preprocessed) {
        write_pgm(*cfg.dump_preprocessed / (knee.knee_id + ".pgm"), al.image, PgmScaling::MinMax);
        write_landmarks(*cfg.dump_preprocessed / (knee.knee_id + ".txt"), al.landmarks);
      }
      for (auto kind : lbp_kinds) {
        auto patch = extract_patch(al.image, al.landmarks, kind, cfg.roi);
        const auto h = lbp_histogram(patch, cfg.lbp);
        auto row = store.lbp.at(kind).values.row(static_cast<Eigen::Index>(i));
        for (int b = 0; b < bins; ++b) row(b) = h.values[static_cast<std::size_t>(b)];
      }
      for (auto kind : cnn_kinds) {
        const auto patch = extract_patch(al.image, al.landmarks, kind, cfg.roi);
        const auto small = resize(patch.pixels, side, side);
        auto dst = store.cnn_patches.at(kind).image(static_cast<int>(i));
        std::copy(small.pixels().begin(), small.pixels().end(), dst.begin());
      }
    } catch (const Error& e) {
      throw Error(e.kind(), "knee '" + knee.knee_id + "': " + e.what());
    }
  });
  logger()->info("extracted features for {} knees", n);
  return store;
}

// ---------------------------------------------------------------------------
// Out-of-fold runs

namespace {

struct FoldSplit {
  std::vector<int> train;
  std::vector<int> test;
  std::size_t train_subjects = 0;
};

/// Index split for fold f with the structural leakage audit.
FoldSplit split_fold(const Dataset& ds, const FoldAssignment& folds, int f) {
  FoldSplit s;
  std::set<std::string> train_subjects;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (folds.fold(ds[i].knee_id) == f) {
      s.test.push_back(static_cast<int>(i));
    } else {
      s.train.push_back(static_cast<int>(i));
      train_subjects.insert(ds[i].subject_id);
    }
  }
  for (int i : s.test)
    if (train_subjects.count(ds[static_cast<std::size_t>(i)].subject_id))
      throw Error(ErrorKind::Invalid, "fold " + std::to_string(f) + " leaks subject '" +
                                          ds[static_cast<std::size_t>(i)].subject_id + "' into training");
  if (s.train.empty() || s.test.empty()) throw Error(ErrorKind::Invalid, "fold " + std::to_string(f) + " is empty");
  s.train_subjects = train_subjects.size();
  return s;
}

FeatureMatrix select_rows(const FeatureMatrix& m, const std::vector<int>& rows) {
  FeatureMatrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(rows[r]);
  return out;
}

std::vector<int> select_labels(const Dataset& ds, const std::vector<int>& rows) {
  std::vector<int> y;
  y.reserve(rows.size());
  for (int r : rows) y.push_back(ds[static_cast<std::size_t>(r)].label);
  return y;
}

OofPredictions empty_oof(const std::string& name, const Dataset& ds, const FoldAssignment& folds) {
  OofPredictions o;
  o.name = name;
  o.fold_hash = folds.hash();
  for (const auto& s : ds.samples()) {
    o.knee_ids.push_back(s.knee_id);
    o.labels.push_back(s.label);
  }
  o.scores.assign(ds.size(), 0.0);
  o.source_fold.assign(ds.size(), -1);
  return o;
}

void require_aligned(const std::vector<std::string>& ids, const Dataset& ds, const std::string& what) {
  if (ids.size() != ds.size()) throw Error(ErrorKind::Invalid, what + " does not cover the dataset");
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] != ds[i].knee_id) throw Error(ErrorKind::Invalid, what + " rows are not in dataset order");
}

}  // namespace

ModelRun run_gbm_model(const std::string& name, const FeatureTable& features, const Dataset& ds,
                       const FoldAssignment& folds, const GbmConfig& cfg, const RunOptions& opt) {
  require_aligned(features.knee_ids, ds, "feature table for " + name);
  ModelRun run;
  run.oof = empty_oof(name, ds, folds);
  run.folds.resize(static_cast<std::size_t>(folds.k));
  if (opt.model_dir) fs::create_directories(*opt.model_dir);
  parallel_for(static_cast<std::size_t>(folds.k), opt.threads, [&](std::size_t fi) {
    const int f = static_cast<int>(fi);
    const auto split = split_fold(ds, folds, f);
    const auto y = select_labels(ds, split.train);
    const auto model = train_gbm(select_rows(features.values, split.train), y, cfg, features.schema);
    const auto p = predict_gbm(model, select_rows(features.values, split.test));
    for (std::size_t t = 0; t < split.test.size(); ++t) {
      const auto i = static_cast<std::size_t>(split.test[t]);
      run.oof.scores[i] = p[t];
      run.oof.source_fold[i] = f;
    }
    run.folds[fi] = {f, split.train.size(), split.test.size(), split.train_subjects, -1, 0.0};
    if (opt.model_dir) {
      std::ofstream out(*opt.model_dir / (name + "_fold" + std::to_string(f) + ".json"));
      out << serialize_gbm(model);
    }
    logger()->info("{} fold {}: trained on {} knees, predicted {}", name, f, split.train.size(), split.test.size());
  });
  return run;
}

ModelRun run_cnn_model(const std::string& name, const ImageBatch& patches, const Dataset& ds,
                       const FoldAssignment& folds, const CnnConfig& cnn, const TrainConfig& train,
                       double val_fraction, std::uint64_t seed, const RunOptions& opt) {
  if (static_cast<std::size_t>(patches.count) != ds.size() || patches.size != cnn.input_size)
    throw Error(ErrorKind::Invalid, "CNN patches do not match the dataset or the input size");
  ModelRun run;
  run.oof = empty_oof(name, ds, folds);
  run.folds.resize(static_cast<std::size_t>(folds.k));
  if (opt.model_dir) fs::create_directories(*opt.model_dir);
  parallel_for(static_cast<std::size_t>(folds.k), opt.threads, [&](std::size_t fi) {
    const int f = static_cast<int>(fi);
    const auto split = split_fold(ds, folds, f);

    // subject-wise inner split of the training knees for epoch selection
    std::vector<FoldItem> items;
    for (int i : split.train) {
      const auto& s = ds[static_cast<std::size_t>(i)];
      items.push_back({s.knee_id, s.subject_id, s.label});
    }
    std::set<std::string> pos_subjects, neg_subjects;
    for (const auto& it : items) (it.label ? pos_subjects : neg_subjects).insert(it.subject_id);
    const int wanted = std::max(2, static_cast<int>(std::lround(1.0 / val_fraction)));
    const int inner_k = std::min({wanted, static_cast<int>(pos_subjects.size()), static_cast<int>(neg_subjects.size())});
    if (inner_k < 2) throw Error(ErrorKind::Invalid, "too few subjects for a CNN validation split");
    const auto inner = stratified_subject_kfold(items, inner_k, mix_seed(seed, 100 + fi));
    std::vector<int> tr, va;
    for (int i : split.train) (inner.fold(ds[static_cast<std::size_t>(i)].knee_id) == 0 ? va : tr).push_back(i);

    CnnConfig c = cnn;
    c.seed = mix_seed(seed, 200 + fi);
    TrainConfig t = train;
    t.seed = mix_seed(seed, 300 + fi);
    const auto ytr = select_labels(ds, tr), yva = select_labels(ds, va);
    auto result = train_cnn(patches.select(tr), ytr, patches.select(va), yva, c, t);
    const auto p = predict_cnn(result.model, patches.select(split.test));
    for (std::size_t k = 0; k < split.test.size(); ++k) {
      const auto i = static_cast<std::size_t>(split.test[k]);
      run.oof.scores[i] = p[k];
      run.oof.source_fold[i] = f;
    }
    const int sel = result.history.selected_epoch;
    run.folds[fi] = {f, split.train.size(), split.test.size(), split.train_subjects, sel,
                     result.history.epochs[static_cast<std::size_t>(sel)].val_auc};
    if (opt.model_dir) save_cnn(result.model, *opt.model_dir / (name + "_fold" + std::to_string(f)));
    logger()->info("{} fold {}: selected epoch {} (val AUC {:.4f})", name, f, sel, run.folds[fi].cnn_val_auc);
  });
  return run;
}

ModelRun stack_models(const std::string& name, const OofPredictions& a, const OofPredictions& b,
                      const Dataset& ds, const FoldAssignment& folds, const GbmConfig& cfg,
                      const RunOptions& opt) {
  const auto hash = folds.hash();
  for (const auto* level1 : {&a, &b}) {
    require_aligned(level1->knee_ids, ds, "level-1 predictions '" + level1->name + "'");
    if (level1->fold_hash != hash)
      throw Error(ErrorKind::Invalid, "level-1 predictions '" + level1->name + "' come from a different fold assignment");
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (level1->source_fold[i] != folds.fold(ds[i].knee_id))
        throw Error(ErrorKind::Invalid, "level-1 predictions '" + level1->name + "' are not out-of-fold for knee '" +
                                            ds[i].knee_id + "'");
  }
  FeatureTable t;
  t.knee_ids = a.knee_ids;
  t.schema = {a.name, b.name};
  t.values.resize(static_cast<Eigen::Index>(ds.size()), 2);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    t.values(static_cast<Eigen::Index>(i), 0) = a.scores[i];
    t.values(static_cast<Eigen::Index>(i), 1) = b.scores[i];
  }
  return run_gbm_model(name, t, ds, folds, cfg, opt);
}

DelongResult compare_models(const PredictionSet& a, const PredictionSet& b) {
  a.validate();
  b.validate();
  if (a.knee_ids.empty() || b.knee_ids.empty()) return delong_test(a, b);
  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < b.knee_ids.size(); ++i) row_of.emplace(b.knee_ids[i], i);
  if (row_of.size() != a.knee_ids.size() || b.knee_ids.size() != a.knee_ids.size())
    throw Error(ErrorKind::Invalid, "prediction files cover different knees");
  PredictionSet bb;
  for (const auto& id : a.knee_ids) {
    const auto it = row_of.find(id);
    if (it == row_of.end()) throw Error(ErrorKind::Invalid, "knee '" + id + "' missing from second prediction file");
    bb.knee_ids.push_back(id);
    bb.scores.push_back(b.scores[it->second]);
    bb.labels.push_back(b.labels[it->second]);
  }
  if (bb.labels != a.labels) throw Error(ErrorKind::Invalid, "prediction files disagree on labels");
  return delong_test(a, bb);
}

void write_predictions(const fs::path& path, const PredictionSet& p) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << "knee_id,score,label\n";
  char buf[32];
  for (std::size_t i = 0; i < p.scores.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", p.scores[i]);
    out << (p.knee_ids.empty() ? std::to_string(i) : p.knee_ids[i]) << ',' << buf << ',' << p.labels[i] << '\n';
  }
}

PredictionSet read_predictions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || (line != "knee_id,score,label" && line != "knee_id,score,label\r"))
    throw Error(ErrorKind::Parse, path.string() + ": expected header 'knee_id,score,label'");
  PredictionSet p;
  std::set<std::string> seen;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto c1 = line.find(','), c2 = line.rfind(',');
    if (c1 == std::string::npos || c1 == c2)
      throw Error(ErrorKind::Parse, path.string() + " row " + std::to_string(row) + ": expected 3 columns");
    const auto id = line.substr(0, c1);
    const auto score_s = line.substr(c1 + 1, c2 - c1 - 1), label_s = line.substr(c2 + 1);
    double score = 0.0;
    int label = 0;
    const auto r1 = std::from_chars(score_s.data(), score_s.data() + score_s.size(), score);
    const auto r2 = std::from_chars(label_s.data(), label_s.data() + label_s.size(), label);
    if (r1.ec != std::errc() || r1.ptr != score_s.data() + score_s.size())
      throw Error(ErrorKind::Parse, path.string() + " row " + std::to_string(row) + ": bad score '" + score_s + "'");
    if (r2.ec != std::errc() || r2.ptr != label_s.data() + label_s.size())
      throw Error(ErrorKind::Parse, path.string() + " row " + std::to_string(row) + ": bad label '" + label_s + "'");
    if (!seen.insert(id).second)
      throw Error(ErrorKind::Parse, path.string() + " row " + std::to_string(row) + ": duplicate knee id '" + id + "'");
    p.knee_ids.push_back(id);
    p.scores.push_back(score);
    p.labels.push_back(label);
  }
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Orchestration

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  const auto ds = load_manifest(cfg.dataset);
  ExperimentResult result;
  result.folds = stratified_subject_kfold(ds, cfg.folds, cfg.effective_fold_seed());
  const auto& folds = result.folds;

  const auto audit = audit_folds(ds, folds);
  if (audit.subject_splits != 0) throw Error(ErrorKind::Invalid, "fold assignment splits subjects");
  for (int f = 0; f < folds.k; ++f)
    logger()->info("fold {}: {} knees, {} positive", f, audit.fold_sizes[static_cast<std::size_t>(f)],
                   audit.fold_positives[static_cast<std::size_t>(f)]);

  // model8 needs a model5 and a model6 run; borrow listed ones or add hidden ones
  std::vector<ModelSpec> plan = cfg.models;
  auto find_kind = [&](ModelKind k) {
    return std::find_if(plan.begin(), plan.end(), [&](const ModelSpec& m) { return m.kind == k; });
  };
  if (find_kind(ModelKind::Stacked) != plan.end()) {
    const auto pos = find_kind(ModelKind::Stacked) - plan.begin();
    for (auto dep : {ModelKind::WomacKl, ModelKind::Cnn}) {
      if (find_kind(dep) != plan.end()) continue;
      auto spec = ModelSpec::parse(dep == ModelKind::WomacKl ? "model5" : "model6");
      spec.name = "_" + spec.name;
      plan.insert(plan.begin() + pos, spec);
    }
  }

  std::set<RoiKind> lbp_kinds, cnn_kinds;
  for (const auto& m : plan) {
    if (m.kind == ModelKind::Lbp || m.kind == ModelKind::Fused) lbp_kinds.insert(m.roi.value_or(cfg.roi_kind));
    if (m.kind == ModelKind::Cnn) cnn_kinds.insert(m.roi.value_or(cfg.cnn_roi));
  }
  const auto store = extract_features(ds, cfg, lbp_kinds, cnn_kinds);

  fs::create_directories(cfg.output_dir / "predictions");
  write_folds_csv((cfg.output_dir / "folds.csv").string(), folds, store.knee_ids);
  RunOptions opt;
  opt.threads = cfg.threads;
  if (cfg.save_models) opt.model_dir = cfg.output_dir / "models";

  std::map<std::string, std::size_t> done;  // name -> index into result.runs
  auto lookup = [&](ModelKind kind) -> const OofPredictions* {
    for (const auto& m : plan)
      if (m.kind == kind) {
        const auto it = done.find(m.name);
        if (it == done.end()) return nullptr;
        return &result.runs[it->second].oof;
      }
    return nullptr;
  };

  for (const auto& spec : plan) {
    const bool is_hidden = spec.name.front() == '_';
    try {
      logger()->info("running {} ({})", spec.name, spec.id);
      ModelRun run;
      switch (spec.kind) {
        case ModelKind::Lbp:
          run = run_gbm_model(spec.name, store.lbp.at(spec.roi.value_or(cfg.roi_kind)), ds, folds, cfg.gbm, opt);
          break;
        case ModelKind::Demographic:
        case ModelKind::Womac:
        case ModelKind::Kl:
        case ModelKind::WomacKl:
          run = run_gbm_model(spec.name, clinical_features(ds, clinical_inputs(spec.kind)), ds, folds, cfg.gbm, opt);
          break;
        case ModelKind::Fused:
          run = run_gbm_model(spec.name,
                              fuse_features(store.lbp.at(spec.roi.value_or(cfg.roi_kind)),
                                            clinical_features(ds, clinical_inputs(spec.kind))),
                              ds, folds, cfg.gbm, opt);
          break;
        case ModelKind::Cnn:
          run = run_cnn_model(spec.name, store.cnn_patches.at(spec.roi.value_or(cfg.cnn_roi)), ds, folds, cfg.cnn,
                              cfg.cnn_train, cfg.cnn_val_fraction, mix_seed(cfg.seed, 7), opt);
          break;
        case ModelKind::Stacked: {
          const auto* a = lookup(ModelKind::WomacKl);
          const auto* b = lookup(ModelKind::Cnn);
          if (!a || !b) throw Error(ErrorKind::Invalid, "stacking needs completed model5 and model6 runs");
          run = stack_models(spec.name, *a, *b, ds, folds, cfg.stack_gbm, opt);
          break;
        }
      }
      if (!is_hidden)
        write_predictions(cfg.output_dir / "predictions" / (spec.name + ".csv"), run.oof.prediction_set());
      done[spec.name] = result.runs.size();
      result.runs.push_back(std::move(run));
    } catch (const std::exception& e) {
      logger()->error("{} failed: {}", spec.name, e.what());
      result.failures[spec.name] = e.what();
    }
  }

  std::vector<NamedPredictions> named;
  for (const auto& spec : cfg.models) {
    const auto it = done.find(spec.name);
    if (it == done.end()) continue;
    const auto& oof = result.runs[it->second].oof;
    named.push_back({spec.name, oof.prediction_set(), oof.source_fold});
  }
  if (!named.empty()) {
    ReportOptions ro;
    ro.ci_method = cfg.ci_method;
    ro.n_boot = cfg.n_boot;
    ro.seed = cfg.seed;
    ro.fold_k = folds.k;
    ro.fold_seed = folds.seed;
    ro.fold_hash = folds.hash();
    result.report = build_report(named, ro);
    result.has_report = true;
    write_report(cfg.output_dir, result.report, named);
  }
  return result;
}

}  // namespace texroi
