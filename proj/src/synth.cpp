#include "texroi/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "texroi/error.hpp"
#include "texroi/log.hpp"

#include <spdlog/spdlog.h>

namespace texroi {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  if (n_subjects < 10) throw Error(ErrorKind::Invalid, "synth needs at least 10 subjects");
  if (knees_per_subject != 1 && knees_per_subject != 2)
    throw Error(ErrorKind::Invalid, "knees_per_subject must be 1 or 2");
  if (!(prevalence > 0.0 && prevalence < 1.0)) throw Error(ErrorKind::Invalid, "prevalence must be in (0,1)");
  if (!(texture_effect >= 0.0) || !(clinical_effect >= 0.0))
    throw Error(ErrorKind::Invalid, "effects must be non-negative");
  if (image_size < 64) throw Error(ErrorKind::Invalid, "image_size must be at least 64");
  if (!(spacing > 0.0)) throw Error(ErrorKind::Invalid, "spacing must be positive");
}

namespace {

std::uint64_t substream(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// White noise blurred by a separable Gaussian and rescaled to unit std.
std::vector<double> smooth_noise(int w, int h, double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  std::vector<double> v(static_cast<std::size_t>(w) * h);
  for (auto& x : v) x = n01(rng);
  const int rad = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * rad + 1));
  for (int i = -rad; i <= rad; ++i) k[static_cast<std::size_t>(i + rad)] = std::exp(-0.5 * i * i / (sigma * sigma));
  std::vector<double> tmp(v.size());
  auto at = [&](const std::vector<double>& a, int x, int y) {
    x = std::clamp(x, 0, w - 1);
    y = std::clamp(y, 0, h - 1);
    return a[static_cast<std::size_t>(y) * w + x];
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -rad; i <= rad; ++i) s += k[static_cast<std::size_t>(i + rad)] * at(v, x + i, y);
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -rad; i <= rad; ++i) s += k[static_cast<std::size_t>(i + rad)] * at(tmp, x, y + i);
      v[static_cast<std::size_t>(y) * w + x] = s;
    }
  double mean = 0.0, sq = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) sq += (x - mean) * (x - mean);
  const double sd = std::sqrt(sq / static_cast<double>(v.size()));
  for (auto& x : v) x = (x - mean) / sd;
  return v;
}

}  // namespace

SynthKnee render_knee(const SynthConfig& cfg, std::uint64_t knee_seed, int label, Side side) {
  std::mt19937_64 rng(knee_seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> n01;
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  const int n = cfg.image_size;
  const double nd = n;
  const double cx = nd / 2.0 + uni(-0.04, 0.04) * nd;
  const double cy = nd / 2.0 + uni(-0.04, 0.04) * nd;
  const double a = nd * uni(0.20, 0.25);
  const double b = a * uni(0.70, 0.85);
  const double phi = uni(-20.0, 20.0) * std::numbers::pi / 180.0;
  const double cp = std::cos(phi), sp = std::sin(phi);
  const double gain = uni(0.8, 1.25), offset = uni(-100.0, 100.0);
  const double noise_sd = 20.0 * uni(0.8, 1.2);
  const double texture_amp = 70.0 * cfg.texture_effect * uni(0.5, 1.5) * label;

  const auto bg = smooth_noise(n, n, 8.0, rng);
  const auto base = smooth_noise(n, n, 4.0, rng);
  const auto texture = smooth_noise(n, n, 2.0, rng);
  std::vector<double> white(static_cast<std::size_t>(n) * n);
  for (auto& x : white) x = n01(rng);

  ImageGrid img(n, n, cfg.spacing);
  const double band = 0.2 * 2.0 * b;  // rows below the superior margin carrying the signal
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const auto i = static_cast<std::size_t>(y) * n + x;
      const double dx = x - cx, dy = y - cy;
      const double u = cp * dx + sp * dy, v = -sp * dx + cp * dy;
      const double r = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
      const double inside = std::clamp(0.5 - (r - 1.0) * std::min(a, b) / 2.0, 0.0, 1.0);
      const double depth = v + b;
      const double in_band = depth < band ? 1.0 : std::exp(-(depth - band) / 3.0);
      const double value = 900.0 + 60.0 * bg[i] + inside * (700.0 + 120.0 * base[i]) + noise_sd * white[i] +
                           inside * in_band * texture_amp * texture[i];
      img(x, y) = std::clamp(offset + gain * value, 0.0, 65535.0);
    }

  auto to_image = [&](double u, double v) {
    return Point{cx + cp * u - sp * v + 0.3 * n01(rng), cy + sp * u + cp * v + 0.3 * n01(rng)};
  };
  LandmarkSet lm;
  for (std::size_t k = 0; k < kContourPoints; ++k) {
    const double t = 2.0 * std::numbers::pi * static_cast<double>(k) / kContourPoints;
    lm.contour[k] = to_image(a * std::cos(t), b * std::sin(t));
  }
  lm.superior = to_image(0.0, -b);
  lm.inferior = to_image(0.0, b);

  if (side == Side::Right) return {hflip(img), hflip_landmarks(lm, n)};
  return {std::move(img), lm};
}

Dataset synth_manifest(const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const int kps = cfg.knees_per_subject;
  const auto n_knees = static_cast<std::size_t>(cfg.n_subjects) * static_cast<std::size_t>(kps);
  const auto n_pos = static_cast<std::size_t>(std::lround(cfg.prevalence * static_cast<double>(n_knees)));

  std::mt19937_64 rng(substream(cfg.seed, 0));
  std::vector<int> labels(n_knees, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_pos), 1);
  std::shuffle(labels.begin(), labels.end(), rng);

  std::normal_distribution<double> n01;
  std::bernoulli_distribution coin(0.5), male(0.4);
  const double c = cfg.clinical_effect;
  std::vector<KneeSample> samples;
  samples.reserve(n_knees);
  for (int s = 0; s < cfg.n_subjects; ++s) {
    char subject[32];
    std::snprintf(subject, sizeof subject, "S%04d", s + 1);
    const auto first = static_cast<std::size_t>(s) * static_cast<std::size_t>(kps);
    double frac_pos = 0.0;
    for (int k = 0; k < kps; ++k) frac_pos += labels[first + static_cast<std::size_t>(k)];
    frac_pos /= kps;
    // subject-level covariates: age and BMI weakly informative, sex not at all
    const double age = std::round((62.0 + 8.0 * n01(rng) + c * 4.0 * frac_pos) * 10.0) / 10.0;
    const int sex = male(rng) ? 1 : 0;
    const double bmi = std::round(std::max(16.0, 30.0 + 4.5 * n01(rng) + c * 2.0 * frac_pos) * 10.0) / 10.0;
    const bool lone_right = coin(rng);
    for (int k = 0; k < kps; ++k) {
      const auto idx = first + static_cast<std::size_t>(k);
      const int y = labels[idx];
      const Side side = kps == 2 ? (k == 0 ? Side::Left : Side::Right) : (lone_right ? Side::Right : Side::Left);
      KneeSample ks;
      ks.knee_id = std::string(subject) + "_" + to_string(side);
      ks.subject_id = subject;
      ks.side = side;
      ks.image_path = out_dir / "images" / (ks.knee_id + ".pgm");
      ks.landmark_path = out_dir / "landmarks" / (ks.knee_id + ".txt");
      ks.clinical.age = age;
      ks.clinical.sex = sex;
      ks.clinical.bmi = bmi;
      // knee-level covariates: KL carries the strongest label dependence
      ks.clinical.womac = std::round(std::clamp(20.0 + 14.0 * n01(rng) + c * 9.0 * y, 0.0, 96.0) * 10.0) / 10.0;
      ks.clinical.kl = static_cast<int>(std::clamp(std::round(1.0 + 0.9 * n01(rng) + c * 1.6 * y), 0.0, 4.0));
      ks.label = y;
      samples.push_back(std::move(ks));
    }
  }
  return Dataset(std::move(samples));
}

fs::path generate_cohort(const SynthConfig& cfg, const fs::path& out_dir) {
  const Dataset ds = synth_manifest(cfg, out_dir);
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "landmarks", ec);
  if (ec || !fs::is_directory(out_dir / "images"))
    throw Error(ErrorKind::Io, "cannot create output directory '" + out_dir.string() + "'");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& ks = ds[i];
    const auto knee = render_knee(cfg, substream(cfg.seed, 1000 + i), ks.label, ks.side);
    write_pgm(ks.image_path, knee.image, PgmScaling::Raw);
    write_landmarks(ks.landmark_path, knee.landmarks);
  }
  const auto manifest = out_dir / "manifest.csv";
  write_manifest(manifest, ds);
  logger()->info("wrote {} knees ({} positive) to {}", ds.size(), ds.positives(), out_dir.string());
  return manifest;
}

}  // namespace texroi
