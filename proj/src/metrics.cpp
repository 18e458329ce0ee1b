#include "texroi/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "texroi/error.hpp"
#include "texroi/image.hpp"

namespace texroi {

void PredictionSet::validate() const {
  if (scores.size() != labels.size() || (!knee_ids.empty() && knee_ids.size() != scores.size()))
    throw Error(ErrorKind::Invalid, "prediction set fields have different lengths");
  for (double s : scores)
    if (!(s >= 0.0 && s <= 1.0)) throw Error(ErrorKind::Invalid, "prediction score outside [0,1]");
  for (int l : labels)
    if (l != 0 && l != 1) throw Error(ErrorKind::Invalid, "prediction label not 0 or 1");
}

std::size_t PredictionSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

namespace {

struct ClassCounts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

ClassCounts count_classes(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size())
    throw Error(ErrorKind::Invalid, "scores and labels differ in length");
  ClassCounts c;
  for (int l : labels) (l ? c.pos : c.neg)++;
  return c;
}

void require_both(const ClassCounts& c) {
  if (c.pos == 0 || c.neg == 0)
    throw Error(ErrorKind::Invalid, "metric needs both positive and negative cases");
}

/// Indices sorted by descending score; ties keep input order.
std::vector<std::size_t> descending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  const auto c = count_classes(scores, labels);
  require_both(c);
  // midranks in ascending order; the positive rank sum gives wins + ties/2
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) rank_sum += mid;
    i = j;
  }
  const double np = static_cast<double>(c.pos), nn = static_cast<double>(c.neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  const auto c = count_classes(scores, labels);
  if (c.pos == 0) throw Error(ErrorKind::Invalid, "average precision needs a positive case");
  const auto idx = descending(scores);
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? tp : fp)++;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(c.pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double brier(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty() || scores.size() != labels.size())
    throw Error(ErrorKind::Invalid, "brier needs equal-length, non-empty inputs");
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double d = scores[i] - labels[i];
    sum += d * d;
  }
  return sum / static_cast<double>(scores.size());
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

DelongResult delong_test(const PredictionSet& a, const PredictionSet& b) {
  if (a.scores.size() != b.scores.size() || a.labels != b.labels)
    throw Error(ErrorKind::Invalid, "DeLong test needs paired predictions with identical labels");
  if (!a.knee_ids.empty() && !b.knee_ids.empty() && a.knee_ids != b.knee_ids)
    throw Error(ErrorKind::Invalid, "DeLong test needs predictions on the same knees in the same order");
  const auto& y = a.labels;
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < y.size(); ++i) (y[i] ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty())
    throw Error(ErrorKind::Invalid, "DeLong test needs both classes");
  const double np = static_cast<double>(pos.size()), nn = static_cast<double>(neg.size());

  auto psi = [](double x, double yv) { return x > yv ? 1.0 : (x == yv ? 0.5 : 0.0); };
  // structural components: v10 per positive, v01 per negative
  auto components = [&](const std::vector<double>& s, std::vector<double>& v10, std::vector<double>& v01) {
    v10.assign(pos.size(), 0.0);
    v01.assign(neg.size(), 0.0);
    for (std::size_t i = 0; i < pos.size(); ++i)
      for (std::size_t j = 0; j < neg.size(); ++j) {
        const double w = psi(s[pos[i]], s[neg[j]]);
        v10[i] += w;
        v01[j] += w;
      }
    for (double& v : v10) v /= nn;
    for (double& v : v01) v /= np;
  };
  std::vector<double> a10, a01, b10, b01;
  components(a.scores, a10, a01);
  components(b.scores, b10, b01);

  DelongResult r;
  r.auc_a = std::accumulate(a10.begin(), a10.end(), 0.0) / np;
  r.auc_b = std::accumulate(b10.begin(), b10.end(), 0.0) / np;

  auto cov = [](const std::vector<double>& u, double mu, const std::vector<double>& v, double mv) {
    if (u.size() < 2) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - mu) * (v[i] - mv);
    return s / static_cast<double>(u.size() - 1);
  };
  const double ma01 = std::accumulate(a01.begin(), a01.end(), 0.0) / nn;
  const double mb01 = std::accumulate(b01.begin(), b01.end(), 0.0) / nn;
  const double s10_aa = cov(a10, r.auc_a, a10, r.auc_a), s10_bb = cov(b10, r.auc_b, b10, r.auc_b);
  const double s10_ab = cov(a10, r.auc_a, b10, r.auc_b);
  const double s01_aa = cov(a01, ma01, a01, ma01), s01_bb = cov(b01, mb01, b01, mb01);
  const double s01_ab = cov(a01, ma01, b01, mb01);
  const double var = (s10_aa + s10_bb - 2.0 * s10_ab) / np + (s01_aa + s01_bb - 2.0 * s01_ab) / nn;

  const double diff = r.auc_a - r.auc_b;
  if (!(var > 1e-300)) {
    if (diff == 0.0) {
      r.z = 0.0;
      r.p_value = 1.0;
    } else {
      r.z = std::copysign(INFINITY, diff);
      r.p_value = 0.0;
    }
    return r;
  }
  r.z = diff / std::sqrt(var);
  r.p_value = std::clamp(std::erfc(std::abs(r.z) / std::sqrt(2.0)), 0.0, 1.0);
  return r;
}

Interval bootstrap_ci(const PredictionSet& p, Metric metric, int n_boot, double level,
                      std::uint64_t seed) {
  if (n_boot < 100) throw Error(ErrorKind::Invalid, "bootstrap needs n_boot >= 100");
  if (!(level > 0.0 && level < 1.0)) throw Error(ErrorKind::Invalid, "confidence level must be in (0,1)");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < p.labels.size(); ++i) (p.labels[i] ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty()) throw Error(ErrorKind::Invalid, "bootstrap needs both classes");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_pos(0, pos.size() - 1), pick_neg(0, neg.size() - 1);
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(n_boot));
  std::vector<double> s(p.scores.size());
  std::vector<int> y(p.scores.size());
  // stratified draws keep both classes in every resample
  for (int b = 0; b < n_boot; ++b) {
    std::size_t k = 0;
    for (std::size_t i = 0; i < pos.size(); ++i, ++k) {
      s[k] = p.scores[pos[pick_pos(rng)]];
      y[k] = 1;
    }
    for (std::size_t i = 0; i < neg.size(); ++i, ++k) {
      s[k] = p.scores[neg[pick_neg(rng)]];
      y[k] = 0;
    }
    stats.push_back(metric == Metric::Auc ? roc_auc(s, y) : average_precision(s, y));
  }
  std::sort(stats.begin(), stats.end());
  const double tail = (1.0 - level) / 2.0;
  return {quantile_sorted(stats, tail), quantile_sorted(stats, 1.0 - tail)};
}

Interval fold_t_interval(std::span<const double> per_fold, double level) {
  if (per_fold.size() < 2) throw Error(ErrorKind::Invalid, "t-interval needs at least two folds");
  const double n = static_cast<double>(per_fold.size());
  const double mean = std::accumulate(per_fold.begin(), per_fold.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : per_fold) ss += (v - mean) * (v - mean);
  const double se = std::sqrt(ss / (n - 1.0) / n);
  const boost::math::students_t dist(n - 1.0);
  const double t = boost::math::quantile(dist, 0.5 + level / 2.0);
  return {mean - t * se, mean + t * se};
}

// ---------------------------------------------------------------------------
// Curves

namespace {

struct SweepPoint {
  std::size_t tp, fp;
};

std::vector<SweepPoint> threshold_sweep(const PredictionSet& p) {
  const auto idx = descending(p.scores);
  std::vector<SweepPoint> out;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && p.scores[idx[j]] == p.scores[idx[i]]) {
      (p.labels[idx[j]] ? tp : fp)++;
      ++j;
    }
    out.push_back({tp, fp});
    i = j;
  }
  return out;
}

}  // namespace

CurveData roc_curve(const PredictionSet& p) {
  const auto c = count_classes(p.scores, p.labels);
  require_both(c);
  CurveData curve;
  curve.kind = CurveKind::Roc;
  curve.points.emplace_back(0.0, 0.0);
  for (const auto& s : threshold_sweep(p))
    curve.points.emplace_back(static_cast<double>(s.fp) / static_cast<double>(c.neg),
                              static_cast<double>(s.tp) / static_cast<double>(c.pos));
  double area = 0.0;
  for (std::size_t i = 1; i < curve.points.size(); ++i) {
    const auto [x0, y0] = curve.points[i - 1];
    const auto [x1, y1] = curve.points[i];
    area += (x1 - x0) * (y0 + y1) / 2.0;
  }
  curve.area = area;
  return curve;
}

CurveData pr_curve(const PredictionSet& p) {
  const auto c = count_classes(p.scores, p.labels);
  require_both(c);
  CurveData curve;
  curve.kind = CurveKind::Pr;
  double area = 0.0, prev_recall = 0.0;
  for (const auto& s : threshold_sweep(p)) {
    const double recall = static_cast<double>(s.tp) / static_cast<double>(c.pos);
    const double precision = static_cast<double>(s.tp) / static_cast<double>(s.tp + s.fp);
    curve.points.emplace_back(recall, precision);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  curve.area = area;
  return curve;
}

void write_curve_csv(const std::filesystem::path& path, const CurveData& curve) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << (curve.kind == CurveKind::Roc ? "fpr,tpr\n" : "recall,precision\n");
  out.precision(17);
  for (const auto& [x, y] : curve.points) out << x << ',' << y << '\n';
}

void write_curve_svg(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, CurveData>>& curves,
                     double prevalence) {
  constexpr double kSize = 400.0, kPad = 50.0;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                  "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  const bool roc = curves.empty() || curves.front().second.kind == CurveKind::Roc;
  auto px = [&](double x) { return kPad + x * kSize; };
  auto py = [&](double y) { return kPad + (1.0 - y) * kSize; };

  std::ostringstream svg;
  svg.setf(std::ios::fixed);
  svg.precision(2);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize + 2 * kPad + 160
      << "\" height=\"" << kSize + 2 * kPad << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect x=\"" << kPad << "\" y=\"" << kPad << "\" width=\"" << kSize << "\" height=\"" << kSize
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  if (roc)
    svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(1)
        << "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";
  else
    svg << "<line x1=\"" << px(0) << "\" y1=\"" << py(prevalence) << "\" x2=\"" << px(1) << "\" y2=\""
        << py(prevalence) << "\" stroke=\"gray\" stroke-dasharray=\"6,4\"/>\n";
  svg << "<text x=\"" << px(0.5) << "\" y=\"" << kSize + kPad + 35 << "\" text-anchor=\"middle\">"
      << (roc ? "False positive rate" : "Recall") << "</text>\n";
  svg << "<text x=\"15\" y=\"" << py(0.5) << "\" transform=\"rotate(-90 15 " << py(0.5)
      << ")\" text-anchor=\"middle\">" << (roc ? "True positive rate" : "Precision") << "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    svg << "<text x=\"" << px(v) << "\" y=\"" << kSize + kPad + 15 << "\" text-anchor=\"middle\">" << v
        << "</text>\n";
    svg << "<text x=\"" << kPad - 5 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << v
        << "</text>\n";
  }
  for (std::size_t i = 0; i < curves.size(); ++i) {
    const auto& [name, curve] = curves[i];
    const char* color = kColors[i % 8];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    auto emit = [&](double x, double y) { svg << px(x) << ',' << py(y) << ' '; };
    if (curve.kind == CurveKind::Pr) {
      // step rendering: precision holds until the next recall
      double prev_r = 0.0;
      for (const auto& [r, p] : curve.points) {
        emit(prev_r, p);
        emit(r, p);
        prev_r = r;
      }
    } else {
      for (const auto& [x, y] : curve.points) emit(x, y);
    }
    svg << "\"/>\n";
    svg << "<text x=\"" << kSize + kPad + 10 << "\" y=\"" << kPad + 15 + 18 * static_cast<double>(i)
        << "\" fill=\"" << color << "\">" << name << " (" << curve.area << ")</text>\n";
  }
  svg << "</svg>\n";
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
  out << svg.str();
}

}  // namespace texroi
