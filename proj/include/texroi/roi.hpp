#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "texroi/image.hpp"

namespace texroi {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

inline constexpr std::size_t kContourPoints = 21;

/// Patellar contour plus the two marginal alignment points, in pixel
/// coordinates of the image they belong to (pixel centers at integers).
struct LandmarkSet {
  std::array<Point, kContourPoints> contour{};
  Point superior;  // superior-margin point
  Point inferior;  // inferior-margin point

  friend bool operator==(const LandmarkSet&, const LandmarkSet&) = default;
};

/// Text format: one `x y` pair per line, 21 contour lines then the superior
/// and inferior marginal points; blank lines and `#` comments are skipped.
LandmarkSet load_landmarks(const std::filesystem::path& path);
void write_landmarks(const std::filesystem::path& path, const LandmarkSet& lm);

/// Maps coordinates through the same pixel-center scaling resample() applies
/// when going from `from_spacing` to `to_spacing`.
LandmarkSet scale_landmarks(const LandmarkSet& lm, double from_spacing, double to_spacing);

/// Mirror counterpart of hflip(): x -> width-1-x.
LandmarkSet hflip_landmarks(const LandmarkSet& lm, int width);

LandmarkSet translate_landmarks(const LandmarkSet& lm, double dx, double dy);

/// True when every point lies inside [0, width-1] x [0, height-1].
bool landmarks_within(const LandmarkSet& lm, int width, int height);

struct AlignedKnee {
  ImageGrid image;
  LandmarkSet landmarks;
};

/// Rigid rotation about the midpoint of the marginal segment so that the
/// superior point sits directly above the inferior one. The image is
/// resampled bilinearly with edge clamping; dims are kept.
AlignedKnee align_patella(const ImageGrid& img, const LandmarkSet& lm);

/// Vertical extent of the contour in pixels.
double patella_height_px(const LandmarkSet& lm);

/// Vertical extent of the contour in millimetres.
inline double patella_height_mm(const LandmarkSet& lm, double spacing) {
  return patella_height_px(lm) * spacing;
}

enum class RoiKind { Superior, Inferior, Whole };
enum class RoiWidthMode {
  BoundingBox,  // contour bounding-box width
  Square,       // width equals ROI height
};

const char* to_string(RoiKind kind) noexcept;
RoiKind roi_kind_from_string(const std::string& name);

struct RoiConfig {
  double height_fraction = 0.20;
  RoiWidthMode width_mode = RoiWidthMode::BoundingBox;
  double spline_smoothing = 0.0;  // 0 interpolates the contour points
  int boundary_samples = 512;     // minimum sampled boundary points
};

/// Binary raster, row-major, 1 = inside.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t operator()(int x, int y) const {
    return bits[static_cast<std::size_t>(y) * width + x];
  }
  std::uint8_t& operator()(int x, int y) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;

  friend bool operator==(const Mask&, const Mask&) = default;
};

struct RoiPatch {
  ImageGrid pixels;
  std::optional<Mask> mask;  // present iff kind == Whole
  RoiKind kind = RoiKind::Superior;
  std::string knee_id;
  int origin_x = 0;  // top-left corner in the source image
  int origin_y = 0;
};

/// Rectangle of round(fraction * patella height) rows flush with the
/// superior (or inferior) marginal landmark row, centered horizontally on the
/// contour bounding box and clipped to the image.
RoiPatch extract_roi(const ImageGrid& img, const LandmarkSet& lm, RoiKind kind,
                     const RoiConfig& cfg = {});

/// Closed cubic spline through (or, with smoothing > 0, near) the contour,
/// chord-length parameterised, sampled densely along each span.
std::vector<Point> closed_spline(const std::vector<Point>& points, int min_samples,
                                 double smoothing = 0.0);

/// Pixels whose centers fall inside the sampled spline boundary (even-odd
/// rule). Throws Degenerate if the sampled boundary self-intersects.
Mask patella_mask(const LandmarkSet& lm, int width, int height, const RoiConfig& cfg = {});

/// Bounding box of the patella mask cropped from `img`, with the cropped mask.
RoiPatch extract_whole_patella(const ImageGrid& img, const LandmarkSet& lm,
                               const RoiConfig& cfg = {});

/// Dispatches to extract_roi or extract_whole_patella.
RoiPatch extract_patch(const ImageGrid& img, const LandmarkSet& lm, RoiKind kind,
                       const RoiConfig& cfg = {});

}  // namespace texroi
