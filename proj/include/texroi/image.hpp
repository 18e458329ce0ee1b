#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "texroi/dataset.hpp"

namespace texroi {

/// Row-major real-valued raster with isotropic physical pixel spacing (mm).
class ImageGrid {
 public:
  ImageGrid() = default;
  ImageGrid(int width, int height, double spacing, double fill = 0.0);
  ImageGrid(int width, int height, double spacing, std::vector<double> pixels);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  double spacing() const noexcept { return spacing_; }
  std::size_t size() const noexcept { return pixels_.size(); }
  bool empty() const noexcept { return pixels_.empty(); }

  double operator()(int x, int y) const { return pixels_[index(x, y)]; }
  double& operator()(int x, int y) { return pixels_[index(x, y)]; }

  std::span<const double> pixels() const noexcept { return pixels_; }
  std::span<double> pixels() noexcept { return pixels_; }

  bool contains(int x, int y) const noexcept {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  /// Sub-rectangle copy; the rectangle must lie inside the image.
  ImageGrid crop(int x0, int y0, int w, int h) const;

  friend bool operator==(const ImageGrid&, const ImageGrid&) = default;

 private:
  std::size_t index(int x, int y) const noexcept {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  double spacing_ = 1.0;
  std::vector<double> pixels_;
};

/// Bilinear sample at real pixel coordinates (pixel centers at integers).
/// Coordinates outside the grid clamp to the nearest edge pixel.
double sample_bilinear(const ImageGrid& img, double x, double y);

/// Reads a single-channel 8/16-bit PNG or a PGM (P2/P5). Sample values are
/// copied unchanged; `spacing` is attached.
ImageGrid load_image(const std::filesystem::path& path, double spacing);

enum class PgmScaling {
  Raw,     // round and clamp values to [0, 65535]
  MinMax,  // stretch [min, max] to [0, 65535]
};

/// Writes a 16-bit binary PGM.
void write_pgm(const std::filesystem::path& path, const ImageGrid& img,
               PgmScaling scaling = PgmScaling::Raw);

/// Writes a 16-bit grayscale PNG; values are rounded and clamped to [0, 65535].
void write_png(const std::filesystem::path& path, const ImageGrid& img);

/// Linear-interpolation empirical quantile, q in [0, 1], of `sorted` values.
double quantile_sorted(std::span<const double> sorted, double q);

/// Clamps intensities to [P_lo, P_hi]. Throws FlatImage when P_lo == P_hi.
ImageGrid truncate_percentiles(const ImageGrid& img, double lo_pct, double hi_pct);

/// Per-image standardization to mean 0 and population std 1.
ImageGrid global_contrast_normalize(const ImageGrid& img);

/// Bilinear resampling to `target_spacing` with pixel-center alignment.
/// Output dims are round(dim * spacing / target_spacing), at least 1.
ImageGrid resample(const ImageGrid& img, double target_spacing);

/// Bilinear resize to explicit dims, pixel-center aligned; spacing scales so
/// the physical extent along x is preserved.
ImageGrid resize(const ImageGrid& img, int width, int height);

/// Mirrors columns: x -> width-1-x.
ImageGrid hflip(const ImageGrid& img);

enum class NormalizationOrder { TruncateFirst, NormalizeFirst };

struct PreprocessConfig {
  double lo_pct = 5.0;
  double hi_pct = 99.0;
  double target_spacing = 0.2;
  NormalizationOrder order = NormalizationOrder::TruncateFirst;
};

/// Truncation, contrast normalization (in the configured order), resampling
/// to the target spacing, then a horizontal flip for right knees.
ImageGrid preprocess(const ImageGrid& img, Side side, const PreprocessConfig& cfg = {});

}  // namespace texroi
