#include "texroi/roi.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "texroi/error.hpp"

namespace fs = std::filesystem;

namespace texroi {

// ---------------------------------------------------------------------------
// Landmark files and coordinate transforms

LandmarkSet load_landmarks(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open landmarks '" + path.string() + "'");
  std::vector<Point> pts;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    Point p;
    std::string extra;
    if (!(ss >> p.x >> p.y) || (ss >> extra) || !std::isfinite(p.x) || !std::isfinite(p.y))
      throw Error(ErrorKind::Parse, "landmarks '" + path.string() + "' line " +
                                        std::to_string(lineno) + ": expected two numbers");
    pts.push_back(p);
  }
  if (pts.size() != kContourPoints + 2)
    throw Error(ErrorKind::Parse, "landmarks '" + path.string() + "': expected " +
                                      std::to_string(kContourPoints + 2) + " points, found " +
                                      std::to_string(pts.size()));
  LandmarkSet lm;
  std::copy_n(pts.begin(), kContourPoints, lm.contour.begin());
  lm.superior = pts[kContourPoints];
  lm.inferior = pts[kContourPoints + 1];
  if (lm.superior == lm.inferior)
    throw Error(ErrorKind::Invalid, "landmarks '" + path.string() + "': marginal points coincide");
  return lm;
}

void write_landmarks(const fs::path& path, const LandmarkSet& lm) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write landmarks '" + path.string() + "'");
  out.precision(17);
  out << "# 21 contour points, then superior and inferior marginal points\n";
  for (const auto& p : lm.contour) out << p.x << ' ' << p.y << '\n';
  out << lm.superior.x << ' ' << lm.superior.y << '\n';
  out << lm.inferior.x << ' ' << lm.inferior.y << '\n';
}

namespace {

template <class F>
LandmarkSet map_points(const LandmarkSet& lm, F&& f) {
  LandmarkSet out;
  for (std::size_t i = 0; i < kContourPoints; ++i) out.contour[i] = f(lm.contour[i]);
  out.superior = f(lm.superior);
  out.inferior = f(lm.inferior);
  return out;
}

}  // namespace

LandmarkSet scale_landmarks(const LandmarkSet& lm, double from_spacing, double to_spacing) {
  if (!(from_spacing > 0.0 && to_spacing > 0.0))
    throw Error(ErrorKind::Invalid, "spacings must be positive");
  const double ratio = from_spacing / to_spacing;
  return map_points(lm, [ratio](Point p) {
    return Point{(p.x + 0.5) * ratio - 0.5, (p.y + 0.5) * ratio - 0.5};
  });
}

LandmarkSet hflip_landmarks(const LandmarkSet& lm, int width) {
  const double w1 = width - 1;
  return map_points(lm, [w1](Point p) { return Point{w1 - p.x, p.y}; });
}

LandmarkSet translate_landmarks(const LandmarkSet& lm, double dx, double dy) {
  return map_points(lm, [=](Point p) { return Point{p.x + dx, p.y + dy}; });
}

bool landmarks_within(const LandmarkSet& lm, int width, int height) {
  auto inside = [&](const Point& p) {
    return std::isfinite(p.x) && std::isfinite(p.y) && p.x >= 0.0 && p.y >= 0.0 &&
           p.x <= width - 1 && p.y <= height - 1;
  };
  return std::all_of(lm.contour.begin(), lm.contour.end(), inside) && inside(lm.superior) &&
         inside(lm.inferior);
}

// ---------------------------------------------------------------------------
// Alignment

AlignedKnee align_patella(const ImageGrid& img, const LandmarkSet& lm) {
  const double dx = lm.inferior.x - lm.superior.x;
  const double dy = lm.inferior.y - lm.superior.y;
  if (dx == 0.0 && dy == 0.0)
    throw Error(ErrorKind::Degenerate, "marginal landmarks coincide");
  const double theta = M_PI_2 - std::atan2(dy, dx);
  if (theta == 0.0) return {img, lm};

  const double c = std::cos(theta), s = std::sin(theta);
  const Point mid{0.5 * (lm.superior.x + lm.inferior.x), 0.5 * (lm.superior.y + lm.inferior.y)};

  LandmarkSet out_lm = map_points(lm, [&](Point p) {
    const double rx = p.x - mid.x, ry = p.y - mid.y;
    return Point{mid.x + c * rx - s * ry, mid.y + s * rx + c * ry};
  });

  ImageGrid out(img.width(), img.height(), img.spacing());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const double rx = x - mid.x, ry = y - mid.y;
      // inverse rotation pulls each output pixel from the source
      out(x, y) = sample_bilinear(img, mid.x + c * rx + s * ry, mid.y - s * rx + c * ry);
    }
  }
  return {std::move(out), out_lm};
}

double patella_height_px(const LandmarkSet& lm) {
  const auto [lo, hi] = std::minmax_element(
      lm.contour.begin(), lm.contour.end(), [](const Point& a, const Point& b) { return a.y < b.y; });
  return hi->y - lo->y;
}

// ---------------------------------------------------------------------------
// Rectangular ROIs

const char* to_string(RoiKind kind) noexcept {
  switch (kind) {
    case RoiKind::Superior: return "superior";
    case RoiKind::Inferior: return "inferior";
    case RoiKind::Whole: return "whole";
  }
  return "?";
}

RoiKind roi_kind_from_string(const std::string& name) {
  if (name == "superior") return RoiKind::Superior;
  if (name == "inferior") return RoiKind::Inferior;
  if (name == "whole") return RoiKind::Whole;
  throw Error(ErrorKind::Invalid, "unknown ROI kind '" + name + "'");
}

RoiPatch extract_roi(const ImageGrid& img, const LandmarkSet& lm, RoiKind kind,
                     const RoiConfig& cfg) {
  if (kind == RoiKind::Whole) return extract_whole_patella(img, lm, cfg);
  const auto [xmin_it, xmax_it] = std::minmax_element(
      lm.contour.begin(), lm.contour.end(), [](const Point& a, const Point& b) { return a.x < b.x; });
  const double height = patella_height_px(lm);
  const double extent_x = xmax_it->x - xmin_it->x;
  if (!(height > 0.0) || !(extent_x > 0.0))
    throw Error(ErrorKind::Degenerate, "degenerate patella (zero height or width)");

  const int rows = std::max(1, static_cast<int>(std::lround(cfg.height_fraction * height)));
  const int cols = cfg.width_mode == RoiWidthMode::Square
                       ? rows
                       : static_cast<int>(std::lround(extent_x)) + 1;
  const double center_x = 0.5 * (xmin_it->x + xmax_it->x);
  const int x0 = static_cast<int>(std::lround(center_x - 0.5 * (cols - 1)));
  const int y0 = kind == RoiKind::Superior
                     ? static_cast<int>(std::lround(lm.superior.y))
                     : static_cast<int>(std::lround(lm.inferior.y)) - rows + 1;

  const int cx0 = std::max(x0, 0), cy0 = std::max(y0, 0);
  const int cx1 = std::min(x0 + cols, img.width()), cy1 = std::min(y0 + rows, img.height());
  if (cx1 <= cx0 || cy1 <= cy0) throw Error(ErrorKind::Degenerate, "ROI lies outside the image");

  RoiPatch patch;
  patch.pixels = img.crop(cx0, cy0, cx1 - cx0, cy1 - cy0);
  patch.kind = kind;
  patch.origin_x = cx0;
  patch.origin_y = cy0;
  return patch;
}

// ---------------------------------------------------------------------------
// Spline contour and mask

std::vector<Point> closed_spline(const std::vector<Point>& points, int min_samples,
                                 double smoothing) {
  const int n = static_cast<int>(points.size());
  if (n < 3) throw Error(ErrorKind::Degenerate, "closed spline needs at least 3 points");
  if (smoothing < 0.0) throw Error(ErrorKind::Invalid, "spline smoothing must be >= 0");

  // chord-length knot spacing, h[i] spans point i -> i+1 (cyclic)
  std::vector<double> h(n);
  for (int i = 0; i < n; ++i) {
    const Point& a = points[i];
    const Point& b = points[(i + 1) % n];
    h[i] = std::hypot(b.x - a.x, b.y - a.y);
    if (!(h[i] > 0.0)) throw Error(ErrorKind::Degenerate, "repeated consecutive contour points");
  }

  // Periodic Reinsch form: R m = Q^T g, g = (I + smoothing Q R^-1 Q^T)^-1 y.
  Eigen::MatrixXd R = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd Qt = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    const int prev = (i + n - 1) % n, next = (i + 1) % n;
    R(i, prev) += h[prev] / 6.0;
    R(i, i) += (h[prev] + h[i]) / 3.0;
    R(i, next) += h[i] / 6.0;
    Qt(i, prev) += 1.0 / h[prev];
    Qt(i, i) -= 1.0 / h[prev] + 1.0 / h[i];
    Qt(i, next) += 1.0 / h[i];
  }
  Eigen::MatrixXd y(n, 2);
  for (int i = 0; i < n; ++i) y.row(i) << points[i].x, points[i].y;

  const auto Rlu = R.partialPivLu();
  Eigen::MatrixXd g = y;
  if (smoothing > 0.0) {
    const Eigen::MatrixXd K = Qt.transpose() * Rlu.solve(Qt);
    g = (Eigen::MatrixXd::Identity(n, n) + smoothing * K).partialPivLu().solve(y);
  }
  const Eigen::MatrixXd m = Rlu.solve(Qt * g);

  const int per_span = std::max(2, (std::max(min_samples, n) + n - 1) / n);
  std::vector<Point> out;
  out.reserve(static_cast<std::size_t>(per_span) * n);
  for (int i = 0; i < n; ++i) {
    const int j = (i + 1) % n;
    for (int k = 0; k < per_span; ++k) {
      const double t = static_cast<double>(k) / per_span;
      const double u = 1.0 - t;
      const double hh = h[i] * h[i] / 6.0;
      const double cu = (u * u * u - u) * hh, ct = (t * t * t - t) * hh;
      out.push_back({u * g(i, 0) + t * g(j, 0) + cu * m(i, 0) + ct * m(j, 0),
                     u * g(i, 1) + t * g(j, 1) + cu * m(i, 1) + ct * m(j, 1)});
    }
  }
  return out;
}

namespace {

double cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

bool segments_cross(const Point& a, const Point& b, const Point& c, const Point& d) {
  const double d1 = cross(c, d, a), d2 = cross(c, d, b);
  const double d3 = cross(a, b, c), d4 = cross(a, b, d);
  return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

bool self_intersects(const std::vector<Point>& poly) {
  const std::size_t m = poly.size();
  for (std::size_t i = 0; i < m; ++i) {
    const Point& a = poly[i];
    const Point& b = poly[(i + 1) % m];
    double ax0 = std::min(a.x, b.x), ax1 = std::max(a.x, b.x);
    double ay0 = std::min(a.y, b.y), ay1 = std::max(a.y, b.y);
    for (std::size_t j = i + 2; j < m; ++j) {
      if (i == 0 && j == m - 1) continue;  // adjacent through the wrap
      const Point& c = poly[j];
      const Point& d = poly[(j + 1) % m];
      if (std::max(c.x, d.x) < ax0 || std::min(c.x, d.x) > ax1 || std::max(c.y, d.y) < ay0 ||
          std::min(c.y, d.y) > ay1)
        continue;
      if (segments_cross(a, b, c, d)) return true;
    }
  }
  return false;
}

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

Mask patella_mask(const LandmarkSet& lm, int width, int height, const RoiConfig& cfg) {
  if (width < 1 || height < 1) throw Error(ErrorKind::Invalid, "mask dimensions must be positive");
  const std::vector<Point> boundary = closed_spline(
      std::vector<Point>(lm.contour.begin(), lm.contour.end()), cfg.boundary_samples,
      cfg.spline_smoothing);
  if (self_intersects(boundary))
    throw Error(ErrorKind::Degenerate, "sampled patella boundary self-intersects");

  Mask mask(width, height);
  const std::size_t m = boundary.size();
  std::vector<double> xs;
  for (int y = 0; y < height; ++y) {
    xs.clear();
    for (std::size_t i = 0; i < m; ++i) {
      const Point& a = boundary[i];
      const Point& b = boundary[(i + 1) % m];
      if ((a.y > y) != (b.y > y)) xs.push_back(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
      // strictly inside on both ends so mirrored contours give mirrored masks
      const int x_begin = std::max(0, static_cast<int>(std::floor(xs[k])) + 1);
      const int x_end = std::min(width - 1, static_cast<int>(std::ceil(xs[k + 1])) - 1);
      for (int x = x_begin; x <= x_end; ++x) mask(x, y) = 1;
    }
  }
  return mask;
}

RoiPatch extract_whole_patella(const ImageGrid& img, const LandmarkSet& lm, const RoiConfig& cfg) {
  const Mask full = patella_mask(lm, img.width(), img.height(), cfg);
  int x0 = img.width(), y0 = img.height(), x1 = -1, y1 = -1;
  for (int y = 0; y < full.height; ++y)
    for (int x = 0; x < full.width; ++x)
      if (full(x, y)) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw Error(ErrorKind::Degenerate, "patella mask is empty");

  RoiPatch patch;
  patch.pixels = img.crop(x0, y0, x1 - x0 + 1, y1 - y0 + 1);
  Mask cropped(x1 - x0 + 1, y1 - y0 + 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) cropped(x - x0, y - y0) = full(x, y);
  patch.mask = std::move(cropped);
  patch.kind = RoiKind::Whole;
  patch.origin_x = x0;
  patch.origin_y = y0;
  return patch;
}

RoiPatch extract_patch(const ImageGrid& img, const LandmarkSet& lm, RoiKind kind,
                       const RoiConfig& cfg) {
  return kind == RoiKind::Whole ? extract_whole_patella(img, lm, cfg)
                                : extract_roi(img, lm, kind, cfg);
}

}  // namespace texroi
