#include "texroi/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include <json.hpp>

#include "texroi/error.hpp"

namespace texroi {

using ojson = nlohmann::ordered_json;

const char* to_string(CiMethod m) noexcept { return m == CiMethod::Bootstrap ? "bootstrap" : "fold_t"; }

CiMethod ci_method_from_string(const std::string& name) {
  if (name == "bootstrap") return CiMethod::Bootstrap;
  if (name == "fold_t") return CiMethod::FoldT;
  throw Error(ErrorKind::Invalid, "unknown interval method '" + name + "' (bootstrap|fold_t)");
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

const ModelReport& EvalReport::model(const std::string& name) const {
  for (const auto& m : models)
    if (m.name == name) return m;
  throw Error(ErrorKind::Invalid, "report has no model '" + name + "'");
}

namespace {

Interval fold_interval(const NamedPredictions& np, Metric metric, int k, double level) {
  if (np.folds.size() != np.predictions.scores.size())
    throw Error(ErrorKind::Invalid, "per-fold interval needs fold indices for '" + np.name + "'");
  std::vector<double> per_fold;
  for (int f = 0; f < k; ++f) {
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < np.folds.size(); ++i)
      if (np.folds[i] == f) {
        s.push_back(np.predictions.scores[i]);
        y.push_back(np.predictions.labels[i]);
      }
    per_fold.push_back(metric == Metric::Auc ? roc_auc(s, y) : average_precision(s, y));
  }
  return fold_t_interval(per_fold, level);
}

}  // namespace

EvalReport build_report(const std::vector<NamedPredictions>& models, const ReportOptions& opt) {
  if (models.empty()) throw Error(ErrorKind::Invalid, "report needs at least one model");
  const auto& ref = models.front().predictions;
  for (const auto& m : models) {
    m.predictions.validate();
    if (m.predictions.labels != ref.labels ||
        (!m.predictions.knee_ids.empty() && !ref.knee_ids.empty() && m.predictions.knee_ids != ref.knee_ids))
      throw Error(ErrorKind::Invalid, "model '" + m.name + "' covers different knees than '" +
                                          models.front().name + "'");
  }
  EvalReport r;
  r.fold_k = opt.fold_k;
  r.fold_seed = opt.fold_seed;
  r.fold_hash = hex64(opt.fold_hash);
  r.ci_method = to_string(opt.ci_method);
  r.n_boot = opt.ci_method == CiMethod::Bootstrap ? opt.n_boot : 0;
  r.ci_level = opt.level;
  r.ci_seed = opt.seed;
  r.n_knees = ref.scores.size();
  r.prevalence = static_cast<double>(ref.positives()) / static_cast<double>(ref.scores.size());
  for (const auto& m : models) {
    ModelReport mr;
    const auto& p = m.predictions;
    mr.name = m.name;
    mr.n = p.scores.size();
    mr.positives = p.positives();
    mr.auc = roc_auc(p);
    mr.ap = average_precision(p);
    mr.brier = brier(p);
    if (opt.ci_method == CiMethod::Bootstrap) {
      mr.auc_ci = bootstrap_ci(p, Metric::Auc, opt.n_boot, opt.level, opt.seed);
      mr.ap_ci = bootstrap_ci(p, Metric::Ap, opt.n_boot, opt.level, opt.seed);
    } else {
      mr.auc_ci = fold_interval(m, Metric::Auc, opt.fold_k, opt.level);
      mr.ap_ci = fold_interval(m, Metric::Ap, opt.fold_k, opt.level);
    }
    r.models.push_back(mr);
  }
  for (std::size_t i = 0; i < models.size(); ++i)
    for (std::size_t j = i + 1; j < models.size(); ++j)
      r.comparisons.push_back(
          {models[i].name, models[j].name, delong_test(models[i].predictions, models[j].predictions)});
  return r;
}

namespace {

// JSON has no infinity; an infinite z is written as a signed string.
ojson z_to_json(double z) {
  if (std::isinf(z)) return z > 0 ? "inf" : "-inf";
  return z;
}

double z_from_json(const ojson& j) {
  if (j.is_string()) return j.get<std::string>() == "inf" ? INFINITY : -INFINITY;
  return j.get<double>();
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  ojson j;
  j["folds"] = {{"k", r.fold_k}, {"seed", r.fold_seed}, {"assignment_hash", r.fold_hash}};
  j["interval"] = {{"method", r.ci_method}, {"n_boot", r.n_boot}, {"level", r.ci_level}, {"seed", r.ci_seed}};
  j["n_knees"] = r.n_knees;
  j["prevalence"] = r.prevalence;
  j["models"] = ojson::array();
  for (const auto& m : r.models)
    j["models"].push_back({{"name", m.name},
                           {"n", m.n},
                           {"positives", m.positives},
                           {"auc", m.auc},
                           {"auc_ci", {m.auc_ci.lo, m.auc_ci.hi}},
                           {"ap", m.ap},
                           {"ap_ci", {m.ap_ci.lo, m.ap_ci.hi}},
                           {"brier", m.brier}});
  j["delong"] = ojson::array();
  for (const auto& c : r.comparisons)
    j["delong"].push_back({{"a", c.a},
                           {"b", c.b},
                           {"auc_a", c.result.auc_a},
                           {"auc_b", c.result.auc_b},
                           {"z", z_to_json(c.result.z)},
                           {"p", c.result.p_value}});
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  ojson j;
  try {
    j = ojson::parse(text);
    EvalReport r;
    r.fold_k = j.at("folds").at("k").get<int>();
    r.fold_seed = j.at("folds").at("seed").get<std::uint64_t>();
    r.fold_hash = j.at("folds").at("assignment_hash").get<std::string>();
    r.ci_method = j.at("interval").at("method").get<std::string>();
    r.n_boot = j.at("interval").at("n_boot").get<int>();
    r.ci_level = j.at("interval").at("level").get<double>();
    r.ci_seed = j.at("interval").at("seed").get<std::uint64_t>();
    r.n_knees = j.at("n_knees").get<std::size_t>();
    r.prevalence = j.at("prevalence").get<double>();
    for (const auto& m : j.at("models")) {
      ModelReport mr;
      mr.name = m.at("name").get<std::string>();
      mr.n = m.at("n").get<std::size_t>();
      mr.positives = m.at("positives").get<std::size_t>();
      mr.auc = m.at("auc").get<double>();
      mr.auc_ci = {m.at("auc_ci").at(0).get<double>(), m.at("auc_ci").at(1).get<double>()};
      mr.ap = m.at("ap").get<double>();
      mr.ap_ci = {m.at("ap_ci").at(0).get<double>(), m.at("ap_ci").at(1).get<double>()};
      mr.brier = m.at("brier").get<double>();
      r.models.push_back(mr);
    }
    for (const auto& c : j.at("delong")) {
      PairwiseComparison pc;
      pc.a = c.at("a").get<std::string>();
      pc.b = c.at("b").get<std::string>();
      pc.result.auc_a = c.at("auc_a").get<double>();
      pc.result.auc_b = c.at("auc_b").get<double>();
      pc.result.z = z_from_json(c.at("z"));
      pc.result.p_value = c.at("p").get<double>();
      r.comparisons.push_back(pc);
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("malformed report: ") + e.what());
  }
}

void write_report(const std::filesystem::path& dir, const EvalReport& report,
                  const std::vector<NamedPredictions>& models) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "curves");
  {
    std::ofstream out(dir / "report.json");
    if (!out) throw Error(ErrorKind::Io, "cannot write '" + (dir / "report.json").string() + "'");
    out << report_to_json(report);
  }
  std::vector<std::pair<std::string, CurveData>> rocs, prs;
  for (const auto& m : models) {
    auto roc = roc_curve(m.predictions);
    auto pr = pr_curve(m.predictions);
    write_curve_csv(dir / "curves" / (m.name + "_roc.csv"), roc);
    write_curve_csv(dir / "curves" / (m.name + "_pr.csv"), pr);
    rocs.emplace_back(m.name, std::move(roc));
    prs.emplace_back(m.name, std::move(pr));
  }
  write_curve_svg(dir / "curves" / "roc.svg", rocs, report.prevalence);
  write_curve_svg(dir / "curves" / "pr.svg", prs, report.prevalence);
}

}  // namespace texroi
