#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "texroi/image.hpp"
#include "texroi/roi.hpp"

namespace texroi {

enum class TieRule {
  Geq,  // neighbor >= center sets the bit
  Gt,   // neighbor > center sets the bit
};

struct LbpConfig {
  double radius = 2.0;
  int neighbors = 8;
  int bins = 256;
  TieRule tie = TieRule::Geq;

  /// r = 2, p = 8, 256 bins: the reading consistent with a 256-bin histogram.
  static LbpConfig paper() { return {}; }
  /// r = 2, p = 16, 65536 codes range-binned into 256 bins.
  static LbpConfig paper_p16() { return {2.0, 16, 256, TieRule::Geq}; }
  static LbpConfig from_profile(const std::string& name);

  /// Throws Invalid unless radius > 0, 4 <= neighbors <= 24, bins >= 2,
  /// bins <= 2^neighbors and 2^neighbors divisible by bins.
  void validate() const;
  std::uint32_t code_count() const { return std::uint32_t{1} << neighbors; }
  /// Minimum distance in pixels between a valid center and every border.
  int margin() const;
};

/// Precomputed circular sampling offsets for one configuration.
class LbpSampler {
 public:
  explicit LbpSampler(const LbpConfig& cfg);

  /// Code at center (x, y). Neighbor k sits at angle 2*pi*k/p measured
  /// counter-clockwise from +x, i.e. at (x + r cos, y - r sin).
  std::uint32_t code(const ImageGrid& img, int x, int y) const;

  const LbpConfig& config() const noexcept { return cfg_; }

  /// Integer pixels with nonzero weight when sampling around (0, 0): the
  /// center and the bilinear support of every neighbor.
  const std::vector<std::pair<int, int>>& support() const noexcept { return support_; }

 private:
  LbpConfig cfg_;
  std::vector<double> dx_, dy_;
  std::vector<std::pair<int, int>> support_;
};

/// Single code; throws Invalid when the center is closer than margin() to a border.
std::uint32_t lbp_code(const ImageGrid& img, int x, int y, const LbpConfig& cfg);

struct LbpHistogram {
  std::vector<double> values;
  bool normalized = false;
};

/// Histogram of codes over all valid centers of the patch, binned by
/// floor(code / (2^p / bins)). With a mask attached, a center counts only
/// if the center and every pixel it samples with nonzero weight are masked. Throws
/// Degenerate when no center qualifies.
LbpHistogram lbp_histogram(const RoiPatch& patch, const LbpConfig& cfg, bool normalize = true);

}  // namespace texroi
