#include <cmath>
#include <fstream>
#include <numbers>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "texroi/error.hpp"
#include "texroi/roi.hpp"

using namespace texroi;
using texroi::test::TempDir;

namespace {

/// Ellipse contour with marginal points at the top and bottom (y grows down).
LandmarkSet ellipse(double cx, double cy, double a, double b) {
  LandmarkSet lm;
  for (std::size_t k = 0; k < kContourPoints; ++k) {
    const double t = 2.0 * std::numbers::pi * static_cast<double>(k) / kContourPoints;
    lm.contour[k] = {cx + a * std::cos(t), cy + b * std::sin(t)};
  }
  lm.superior = {cx, cy - b};
  lm.inferior = {cx, cy + b};
  return lm;
}

/// Contour spanning rows y0..y1 exactly (top/bottom points on the axis).
LandmarkSet box_like(double x0, double x1, double y0, double y1) {
  LandmarkSet lm;
  const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1), a = 0.5 * (x1 - x0), b = 0.5 * (y1 - y0);
  for (std::size_t k = 0; k < kContourPoints; ++k) {
    // angles chosen so extreme points are hit exactly
    const double t = 2.0 * std::numbers::pi * static_cast<double>(k) / 20.0;
    lm.contour[k] = {cx + a * std::cos(t), cy + b * std::sin(t)};
  }
  lm.contour[20] = {cx, y0};
  lm.contour[5] = {cx, y1};
  lm.contour[0] = {x1, cy};
  lm.contour[10] = {x0, cy};
  lm.superior = {cx, y0};
  lm.inferior = {cx, y1};
  return lm;
}

ImageGrid index_image(int w, int h) {
  ImageGrid img(w, h, 0.2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) img(x, y) = y * 1000 + x;
  return img;
}

double marginal_angle(const LandmarkSet& lm) {
  return std::atan2(lm.inferior.x - lm.superior.x, lm.inferior.y - lm.superior.y);
}

}  // namespace

TEST(Landmarks, LoadsTwentyThreePointsWithComments) {
  TempDir dir("roi");
  const auto lm = ellipse(50, 60, 20, 15);
  write_landmarks(dir / "a.txt", lm);
  {
    std::ofstream f(dir / "b.txt");
    f << "# header\n";
    for (const auto& p : lm.contour) f << p.x << ' ' << p.y << '\n';
    f << "\n" << lm.superior.x << ' ' << lm.superior.y << '\n' << lm.inferior.x << ' ' << lm.inferior.y << '\n';
  }
  EXPECT_EQ(load_landmarks(dir / "a.txt"), lm);
  const auto b = load_landmarks(dir / "b.txt");
  EXPECT_NEAR(b.contour[3].x, lm.contour[3].x, 1e-4);
}

TEST(Landmarks, TwentyOnePointsIsCountError) {
  TempDir dir("roi");
  {
    std::ofstream f(dir / "a.txt");
    for (int i = 0; i < 21; ++i) f << i << ' ' << i << '\n';
  }
  try {
    load_landmarks(dir / "a.txt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("21"), std::string::npos) << e.what();
  }
}

TEST(Landmarks, NonNumericCoordinateIsParseError) {
  TempDir dir("roi");
  {
    std::ofstream f(dir / "a.txt");
    for (int i = 0; i < 22; ++i) f << i << ' ' << i << '\n';
    f << "x 3\n";
  }
  try {
    load_landmarks(dir / "a.txt");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Parse);
  }
}

TEST(Landmarks, ScalingFollowsResampleGrid) {
  // a bright pixel at (x, y) in a 0.1 mm image maps to the scaled landmark in the 0.2 mm grid
  ImageGrid img(40, 40, 0.1, 0.0);
  for (int y = 20; y <= 21; ++y)
    for (int x = 10; x <= 11; ++x) img(x, y) = 1.0;
  const auto out = resample(img, 0.2);
  LandmarkSet lm = ellipse(20, 20, 5, 5);
  lm.contour[0] = {10.5, 20.5};  // centre of the bright 2x2 block
  const auto scaled = scale_landmarks(lm, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(scaled.contour[0].x, (10.5 + 0.5) * 0.5 - 0.5);
  EXPECT_DOUBLE_EQ(scaled.contour[0].y, (20.5 + 0.5) * 0.5 - 0.5);
  // the block collapses onto exactly that output pixel
  EXPECT_EQ(out(5, 10), 1.0);
  EXPECT_EQ(static_cast<int>(scaled.contour[0].x), 5);
  EXPECT_EQ(static_cast<int>(scaled.contour[0].y), 10);
}

TEST(Align, VerticalSegmentIsIdentity) {
  std::mt19937_64 rng(1);
  const auto img = test::random_image(50, 40, rng);
  const auto lm = ellipse(25, 20, 10, 8);
  const auto out = align_patella(img, lm);
  EXPECT_EQ(out.image, img);
  EXPECT_EQ(out.landmarks, lm);
}

TEST(Align, ThirtyDegreeRotationBecomesVertical) {
  std::mt19937_64 rng(2);
  const auto img = test::random_image(80, 80, rng);
  LandmarkSet lm = ellipse(40, 40, 15, 10);
  const double th = 30.0 * std::numbers::pi / 180.0;
  for (Point* p : {&lm.superior, &lm.inferior}) {
    const double rx = p->x - 40, ry = p->y - 40;
    *p = {40 + std::cos(th) * rx - std::sin(th) * ry, 40 + std::sin(th) * rx + std::cos(th) * ry};
  }
  const double before = std::hypot(lm.inferior.x - lm.superior.x, lm.inferior.y - lm.superior.y);
  const auto out = align_patella(img, lm);
  EXPECT_NEAR(marginal_angle(out.landmarks), 0.0, 1e-6);
  EXPECT_LT(out.landmarks.superior.y, out.landmarks.inferior.y);
  const double after = std::hypot(out.landmarks.inferior.x - out.landmarks.superior.x,
                                  out.landmarks.inferior.y - out.landmarks.superior.y);
  EXPECT_NEAR(after / before, 1.0, 1e-6);
}

TEST(Align, UpsideDownSegmentPutsSuperiorOnTop) {
  std::mt19937_64 rng(3);
  const auto img = test::random_image(60, 60, rng);
  LandmarkSet lm = ellipse(30, 30, 10, 10);
  std::swap(lm.superior, lm.inferior);
  const auto out = align_patella(img, lm);
  EXPECT_LT(out.landmarks.superior.y, out.landmarks.inferior.y);
  EXPECT_NEAR(out.landmarks.superior.x, out.landmarks.inferior.x, 1e-9);
}

TEST(Align, ImageFollowsLandmarks) {
  // a bright dot at a contour point ends up under the rotated contour point
  ImageGrid img(101, 101, 0.2, 0.0);
  LandmarkSet lm = ellipse(50, 50, 20, 20);
  lm.superior = {40, 30};
  lm.inferior = {60, 70};
  img(70, 50) = 1.0;
  lm.contour[0] = {70, 50};
  const auto out = align_patella(img, lm);
  const auto p = out.landmarks.contour[0];
  EXPECT_NEAR(out.image.pixels()[static_cast<std::size_t>(std::lround(p.y)) * 101 + std::lround(p.x)],
              sample_bilinear(out.image, p.x, p.y), 1.0);
  EXPECT_GT(sample_bilinear(out.image, p.x, p.y), 0.3);
}

TEST(Height, ArithmeticAndBruteForce) {
  const auto lm = box_like(10, 60, 10, 110);
  EXPECT_DOUBLE_EQ(patella_height_px(lm), 100.0);
  EXPECT_DOUBLE_EQ(patella_height_mm(lm, 0.2), 20.0);
  LandmarkSet flat = lm;
  for (auto& p : flat.contour) p.y = 5.0;
  EXPECT_EQ(patella_height_px(flat), 0.0);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 300);
  for (int t = 0; t < 50; ++t) {
    LandmarkSet r;
    for (auto& p : r.contour) p = {u(rng), u(rng)};
    double lo = 1e9, hi = -1e9;
    for (const auto& p : r.contour) {
      lo = std::min(lo, p.y);
      hi = std::max(hi, p.y);
    }
    EXPECT_EQ(patella_height_px(r), hi - lo);
  }
}

TEST(Roi, SuperiorAndInferiorRowsOfHundredRowPatella) {
  const auto img = index_image(120, 120);
  const auto lm = box_like(10, 60, 0, 99);
  const auto sup = extract_roi(img, lm, RoiKind::Superior);
  EXPECT_EQ(sup.origin_y, 0);
  EXPECT_EQ(sup.pixels.height(), 20);
  const auto inf = extract_roi(img, lm, RoiKind::Inferior);
  EXPECT_EQ(inf.origin_y, 80);
  EXPECT_EQ(inf.pixels.height(), 20);
  EXPECT_FALSE(sup.mask.has_value());
  EXPECT_EQ(sup.kind, RoiKind::Superior);
}

TEST(Roi, MatchesDirectSlicing) {
  const auto img = index_image(200, 150);
  const auto lm = box_like(30, 130, 20, 120);  // width extent 100 -> 101 columns
  const auto sup = extract_roi(img, lm, RoiKind::Superior);
  ASSERT_EQ(sup.pixels.width(), 101);
  ASSERT_EQ(sup.pixels.height(), 20);
  EXPECT_EQ(sup.origin_x, 30);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 101; ++x) EXPECT_EQ(sup.pixels(x, y), img(30 + x, 20 + y));
}

TEST(Roi, SquareWidthMode) {
  const auto img = index_image(200, 150);
  RoiConfig cfg;
  cfg.width_mode = RoiWidthMode::Square;
  const auto sup = extract_roi(img, box_like(30, 130, 20, 120), RoiKind::Superior, cfg);
  EXPECT_EQ(sup.pixels.width(), 20);
  // center 80 with an even width: 70.5 rounds half away from zero
  EXPECT_EQ(sup.origin_x, 71);
}

TEST(Roi, ClippedToImage) {
  const auto img = index_image(100, 100);
  const auto sup = extract_roi(img, box_like(-20, 60, 5, 95), RoiKind::Superior);
  EXPECT_EQ(sup.origin_x, 0);
  EXPECT_EQ(sup.pixels.width(), 61);
}

TEST(Roi, DegenerateAndOutsideErrors) {
  const auto img = index_image(50, 50);
  LandmarkSet flat = box_like(10, 40, 10, 40);
  for (auto& p : flat.contour) p.y = 10;
  EXPECT_THROW(extract_roi(img, flat, RoiKind::Superior), Error);
  EXPECT_THROW(extract_roi(img, translate_landmarks(box_like(10, 40, 10, 40), 500, 0), RoiKind::Superior), Error);
}

TEST(Roi, TranslationEquivariance) {
  const auto img = index_image(160, 160);
  const auto lm = ellipse(60.3, 70.6, 30, 25);
  const auto a = extract_roi(img, lm, RoiKind::Superior);
  // shifting the image content by (dx, dy) and the landmarks by the same amount
  const int dx = 7, dy = 5;
  ImageGrid shifted(160, 160, 0.2, -1.0);
  for (int y = 0; y + dy < 160; ++y)
    for (int x = 0; x + dx < 160; ++x) shifted(x + dx, y + dy) = img(x, y);
  const auto b = extract_roi(shifted, translate_landmarks(lm, dx, dy), RoiKind::Superior);
  EXPECT_EQ(b.origin_x, a.origin_x + dx);
  EXPECT_EQ(b.origin_y, a.origin_y + dy);
  EXPECT_EQ(b.pixels, a.pixels);
}

TEST(Roi, SuperiorAndInferiorNeverOverlap) {
  const auto img = index_image(200, 200);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> h(10, 80), c(80, 120);
  for (int t = 0; t < 100; ++t) {
    const double b = h(rng) / 2.0;
    const auto lm = ellipse(c(rng), c(rng), 30, b);
    const auto sup = extract_roi(img, lm, RoiKind::Superior);
    const auto inf = extract_roi(img, lm, RoiKind::Inferior);
    EXPECT_LE(sup.origin_y + sup.pixels.height(), inf.origin_y) << "height " << 2 * b;
  }
}

TEST(Mask, CircleAreaWithinThreePercent) {
  const double r = 30.0;
  const auto lm = ellipse(50, 50, r, r);
  const auto m = patella_mask(lm, 101, 101);
  const double area = std::numbers::pi * r * r;
  EXPECT_NEAR(static_cast<double>(m.count()) / area, 1.0, 0.03);
}

TEST(Mask, ContourPointsHaveMaskedInteriorNeighbour) {
  const auto lm = ellipse(50, 50, 30, 20);
  const auto m = patella_mask(lm, 101, 101);
  for (const auto& p : lm.contour) {
    // nearest pixel centre one step towards the centre
    const double dx = 50 - p.x, dy = 50 - p.y, len = std::hypot(dx, dy);
    const int x = static_cast<int>(std::lround(p.x + 1.5 * dx / len));
    const int y = static_cast<int>(std::lround(p.y + 1.5 * dy / len));
    EXPECT_EQ(m(x, y), 1) << x << "," << y;
  }
}

TEST(Mask, MirrorSymmetry) {
  const int w = 97, h = 90;
  LandmarkSet lm = ellipse(41.3, 44.7, 25, 18);
  lm.contour[4].x += 3.1;
  lm.contour[11].y -= 2.2;
  const auto m = patella_mask(lm, w, h);
  const auto mm = patella_mask(hflip_landmarks(lm, w), w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) ASSERT_EQ(m(x, y), mm(w - 1 - x, y)) << x << "," << y;
}

TEST(Mask, DeterministicAndSelfIntersectionRejected) {
  const auto lm = ellipse(50, 50, 30, 20);
  EXPECT_EQ(patella_mask(lm, 101, 101), patella_mask(lm, 101, 101));
  LandmarkSet bow = lm;
  // swap two far-apart points to force the boundary to cross itself
  std::swap(bow.contour[2], bow.contour[12]);
  try {
    patella_mask(bow, 101, 101);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
}

TEST(Spline, InterpolatesControlPointsAndIsDense) {
  const auto lm = ellipse(0, 0, 10, 6);
  std::vector<Point> pts(lm.contour.begin(), lm.contour.end());
  const auto s = closed_spline(pts, 512);
  EXPECT_GE(s.size(), 512u);
  for (const auto& p : pts) {
    double best = 1e9;
    for (const auto& q : s) best = std::min(best, std::hypot(p.x - q.x, p.y - q.y));
    EXPECT_LT(best, 1e-9);
  }
}

TEST(Whole, PatchIsMaskBoundingBoxWithCroppedMask) {
  const auto img = index_image(120, 120);
  const auto lm = ellipse(60, 55, 30, 30);
  const auto full = patella_mask(lm, 120, 120);
  int x0 = 1000, y0 = 1000, x1 = -1, y1 = -1;
  for (int y = 0; y < 120; ++y)
    for (int x = 0; x < 120; ++x)
      if (full(x, y)) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  const auto patch = extract_whole_patella(img, lm);
  ASSERT_TRUE(patch.mask.has_value());
  EXPECT_EQ(patch.kind, RoiKind::Whole);
  EXPECT_EQ(patch.origin_x, x0);
  EXPECT_EQ(patch.origin_y, y0);
  EXPECT_EQ(patch.pixels.width(), x1 - x0 + 1);
  EXPECT_EQ(patch.pixels.height(), y1 - y0 + 1);
  EXPECT_EQ(patch.mask->width, patch.pixels.width());
  EXPECT_EQ(patch.mask->count(), full.count());
  for (int y = 0; y < patch.pixels.height(); ++y)
    for (int x = 0; x < patch.pixels.width(); ++x) {
      EXPECT_EQ((*patch.mask)(x, y), full(x + x0, y + y0));
      EXPECT_EQ(patch.pixels(x, y), img(x + x0, y + y0));
    }
}

TEST(Whole, EmptyMaskIsError) {
  const auto img = index_image(50, 50);
  EXPECT_THROW(extract_whole_patella(img, ellipse(20.5, 20.5, 0.2, 0.2)), Error);
}
