#include "texroi/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "texroi/error.hpp"
#include "texroi/experiment.hpp"
#include "texroi/log.hpp"
#include "texroi/synth.hpp"

namespace texroi {

namespace fs = std::filesystem;

namespace {

struct Options {
  // shared
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string dump_preprocessed;
  std::string roi;
  std::string lbp_profile;
  // synth
  SynthConfig synth;
  // run
  std::vector<std::string> models;
  // compare
  std::string a, b;
  // report
  std::string in;
  std::string ci_method;
  int n_boot = 0;
};

ExperimentConfig load_with_overrides(const Options& o) {
  auto cfg = load_experiment_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads > 0) cfg.threads = o.threads;
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (!o.dump_preprocessed.empty()) cfg.dump_preprocessed = fs::path(o.dump_preprocessed);
  if (!o.roi.empty()) cfg.roi_kind = roi_kind_from_string(o.roi);
  if (!o.lbp_profile.empty()) cfg.lbp = LbpConfig::from_profile(o.lbp_profile);
  if (!o.models.empty()) {
    std::vector<ModelSpec> keep;
    for (const auto& name : o.models) {
      const auto it = std::find_if(cfg.models.begin(), cfg.models.end(),
                                   [&](const ModelSpec& m) { return m.name == name; });
      keep.push_back(it != cfg.models.end() ? *it : ModelSpec::parse(name));
    }
    cfg.models = keep;
  }
  return cfg;
}

int cmd_synth(const Options& o, std::ostream& out) {
  auto cfg = o.synth;
  if (o.seed) cfg.seed = *o.seed;
  const auto manifest = generate_cohort(cfg, o.out);
  out << manifest.string() << '\n';
  return 0;
}

int cmd_preprocess(const Options& o, std::ostream& out) {
  auto cfg = load_with_overrides(o);
  const fs::path dir = o.out.empty() ? cfg.output_dir / "preprocessed" : fs::path(o.out);
  cfg.dump_preprocessed = dir;
  const auto ds = load_manifest(cfg.dataset);
  extract_features(ds, cfg, {}, {});
  out << "wrote " << ds.size() << " preprocessed knees to " << dir.string() << '\n';
  return 0;
}

int cmd_extract(const Options& o, std::ostream& out) {
  auto cfg = load_with_overrides(o);
  const fs::path dir = o.out.empty() ? cfg.output_dir : fs::path(o.out);
  std::set<RoiKind> kinds;
  if (o.roi.empty())
    kinds = {RoiKind::Superior, RoiKind::Inferior, RoiKind::Whole};
  else
    kinds = {cfg.roi_kind};
  const auto ds = load_manifest(cfg.dataset);
  const auto store = extract_features(ds, cfg, kinds);
  fs::create_directories(dir);
  for (const auto& [kind, table] : store.lbp) {
    const auto path = dir / ("lbp_" + std::string(to_string(kind)) + ".csv");
    std::ofstream f(path);
    if (!f) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
    f << "knee_id";
    for (Eigen::Index b = 0; b < table.values.cols(); ++b) f << ",bin_" << b;
    f << '\n';
    char buf[32];
    for (std::size_t i = 0; i < table.knee_ids.size(); ++i) {
      f << table.knee_ids[i];
      for (Eigen::Index b = 0; b < table.values.cols(); ++b) {
        std::snprintf(buf, sizeof buf, "%.17g", table.values(static_cast<Eigen::Index>(i), b));
        f << ',' << buf;
      }
      f << '\n';
    }
    out << path.string() << '\n';
  }
  return 0;
}

int cmd_run(const Options& o, std::ostream& out, std::ostream& err) {
  const auto cfg = load_with_overrides(o);
  const auto result = run_experiment(cfg);
  if (result.has_report) {
    char buf[160];
    for (const auto& m : result.report.models) {
      std::snprintf(buf, sizeof buf, "%-16s AUC %.3f (%.3f-%.3f)  AP %.3f (%.3f-%.3f)  Brier %.3f\n", m.name.c_str(),
                    m.auc, m.auc_ci.lo, m.auc_ci.hi, m.ap, m.ap_ci.lo, m.ap_ci.hi, m.brier);
      out << buf;
    }
    out << "report: " << (cfg.output_dir / "report.json").string() << '\n';
  }
  for (const auto& [name, msg] : result.failures) err << "model " << name << " failed: " << msg << '\n';
  return result.failures.empty() ? 0 : 2;
}

int cmd_compare(const Options& o, std::ostream& out) {
  const auto a = read_predictions(o.a);
  const auto b = read_predictions(o.b);
  const auto r = compare_models(a, b);
  char buf[200];
  std::snprintf(buf, sizeof buf, "auc_a=%.6f auc_b=%.6f z=%.6f p=%.6g\n", r.auc_a, r.auc_b, r.z, r.p_value);
  out << buf;
  return 0;
}

int cmd_report(const Options& o, std::ostream& out) {
  const fs::path in(o.in);
  const fs::path dir = o.out.empty() ? in : fs::path(o.out);
  std::vector<fs::path> files;
  if (fs::is_directory(in / "predictions"))
    for (const auto& e : fs::directory_iterator(in / "predictions"))
      if (e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error(ErrorKind::Io, "no prediction files under '" + (in / "predictions").string() + "'");

  // fold assignment from folds.csv; its seed from an earlier report when present
  FoldAssignment folds;
  {
    std::ifstream f(in / "folds.csv");
    std::string line;
    if (f && std::getline(f, line)) {
      while (std::getline(f, line)) {
        const auto c = line.find(',');
        if (c == std::string::npos) continue;
        const int k = std::stoi(line.substr(c + 1));
        folds.fold_of[line.substr(0, c)] = k;
        folds.k = std::max(folds.k, k + 1);
      }
    }
    std::ifstream r(in / "report.json");
    if (r) {
      std::stringstream ss;
      ss << r.rdbuf();
      folds.seed = report_from_json(ss.str()).fold_seed;
    }
  }
  std::vector<NamedPredictions> named;
  for (const auto& p : files) {
    NamedPredictions np{p.stem().string(), read_predictions(p), {}};
    if (!folds.fold_of.empty())
      for (const auto& id : np.predictions.knee_ids) np.folds.push_back(folds.fold(id));
    named.push_back(std::move(np));
  }
  ReportOptions ro;
  if (!o.ci_method.empty()) ro.ci_method = ci_method_from_string(o.ci_method);
  if (o.n_boot > 0) ro.n_boot = o.n_boot;
  ro.seed = o.seed.value_or(0);
  ro.fold_k = folds.k;
  ro.fold_seed = folds.seed;
  ro.fold_hash = folds.hash();
  const auto report = build_report(named, ro);
  write_report(dir, report, named);
  out << "report: " << (dir / "report.json").string() << '\n';
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Patellar texture ROI pipeline: synthetic cohorts, features, models and evaluation", "texroi"};
  app.require_subcommand(1, 1);
  Options o;

  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Random seed"); };
  auto add_threads = [&](CLI::App* c) {
    c->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
  };
  auto add_experiment = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    c->add_option("--dump-preprocessed", o.dump_preprocessed, "Write aligned images and landmarks here");
    c->add_option("--roi", o.roi, "ROI kind")->check(CLI::IsMember({"superior", "inferior", "whole"}));
    c->add_option("--lbp-profile", o.lbp_profile, "LBP profile")->check(CLI::IsMember({"paper", "paper-p16"}));
    add_seed(c);
    add_threads(c);
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--subjects", o.synth.n_subjects, "Number of subjects");
  synth->add_option("--knees-per-subject", o.synth.knees_per_subject, "1 or 2");
  synth->add_option("--prevalence", o.synth.prevalence, "Fraction of positive knees");
  synth->add_option("--texture-effect", o.synth.texture_effect, "Positive-class texture amplitude");
  synth->add_option("--clinical-effect", o.synth.clinical_effect, "Clinical label dependence");
  synth->add_option("--image-size", o.synth.image_size, "Image side in pixels");
  synth->add_option("--spacing", o.synth.spacing, "Pixel spacing in mm");
  add_seed(synth);

  auto* pre = app.add_subcommand("preprocess", "Write preprocessed, aligned images and landmarks");
  pre->add_option("--out", o.out, "Output directory");
  add_experiment(pre);

  auto* ext = app.add_subcommand("extract-features", "Write LBP histograms per ROI kind");
  ext->add_option("--out", o.out, "Output directory");
  add_experiment(ext);

  auto* run = app.add_subcommand("run", "Run the experiment");
  run->add_option("--out", o.out, "Output directory (overrides the config)");
  run->add_option("--models", o.models, "Subset of configured models")->delimiter(',');
  add_experiment(run);

  auto* cmp = app.add_subcommand("compare", "DeLong test between two prediction files");
  cmp->add_option("--a", o.a, "First predictions CSV")->required()->check(CLI::ExistingFile);
  cmp->add_option("--b", o.b, "Second predictions CSV")->required()->check(CLI::ExistingFile);
  add_seed(cmp);

  auto* rep = app.add_subcommand("report", "Rebuild report files from stored predictions");
  rep->add_option("--in", o.in, "Run directory with predictions/ and folds.csv")->required();
  rep->add_option("--out", o.out, "Output directory (defaults to --in)");
  rep->add_option("--ci-method", o.ci_method, "bootstrap or fold_t")->check(CLI::IsMember({"bootstrap", "fold_t"}));
  rep->add_option("--n-boot", o.n_boot, "Bootstrap resamples")->check(CLI::Range(100, 1000000));
  add_seed(rep);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, out);
    if (pre->parsed()) return cmd_preprocess(o, out);
    if (ext->parsed()) return cmd_extract(o, out);
    if (run->parsed()) return cmd_run(o, out, err);
    if (cmp->parsed()) return cmd_compare(o, out);
    if (rep->parsed()) return cmd_report(o, out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return e.kind() == ErrorKind::Usage ? 1 : 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace texroi
