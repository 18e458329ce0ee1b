#include "texroi/lbp.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "texroi/error.hpp"

namespace texroi {

LbpConfig LbpConfig::from_profile(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "paper-p16") return paper_p16();
  throw Error(ErrorKind::Invalid, "unknown LBP profile '" + name + "' (expected paper or paper-p16)");
}

void LbpConfig::validate() const {
  if (!(radius > 0.0) || !std::isfinite(radius))
    throw Error(ErrorKind::Invalid, "LBP radius must be positive");
  if (neighbors < 4 || neighbors > 24)
    throw Error(ErrorKind::Invalid, "LBP neighbors must be in [4, 24]");
  if (bins < 2 || static_cast<std::uint32_t>(bins) > code_count() || code_count() % bins != 0)
    throw Error(ErrorKind::Invalid, "LBP bins must divide 2^neighbors");
}

int LbpConfig::margin() const { return static_cast<int>(std::ceil(radius)) + 1; }

LbpSampler::LbpSampler(const LbpConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::set<std::pair<int, int>> support{{0, 0}};
  for (int k = 0; k < cfg_.neighbors; ++k) {
    const double angle = 2.0 * M_PI * k / cfg_.neighbors;
    dx_.push_back(cfg_.radius * std::cos(angle));
    dy_.push_back(-cfg_.radius * std::sin(angle));
    const int fx = static_cast<int>(std::floor(dx_.back()));
    const int fy = static_cast<int>(std::floor(dy_.back()));
    // the far bilinear neighbor only contributes when the offset is fractional
    const int nx = dx_.back() > fx ? 1 : 0;
    const int ny = dy_.back() > fy ? 1 : 0;
    for (int oy = 0; oy <= ny; ++oy)
      for (int ox = 0; ox <= nx; ++ox) support.insert({fx + ox, fy + oy});
  }
  support_.assign(support.begin(), support.end());
}

std::uint32_t LbpSampler::code(const ImageGrid& img, int x, int y) const {
  const double center = img(x, y);
  std::uint32_t code = 0;
  for (int k = 0; k < cfg_.neighbors; ++k) {
    const double v = sample_bilinear(img, x + dx_[k], y + dy_[k]);
    const bool bit = cfg_.tie == TieRule::Geq ? v >= center : v > center;
    code |= static_cast<std::uint32_t>(bit) << k;
  }
  return code;
}

std::uint32_t lbp_code(const ImageGrid& img, int x, int y, const LbpConfig& cfg) {
  const int m = cfg.margin();
  if (x < m || y < m || x > img.width() - 1 - m || y > img.height() - 1 - m)
    throw Error(ErrorKind::Invalid, "LBP center too close to the image border");
  return LbpSampler(cfg).code(img, x, y);
}

LbpHistogram lbp_histogram(const RoiPatch& patch, const LbpConfig& cfg, bool normalize) {
  const LbpSampler sampler(cfg);
  const ImageGrid& img = patch.pixels;
  const int m = cfg.margin();
  const std::uint32_t width = cfg.code_count() / static_cast<std::uint32_t>(cfg.bins);

  LbpHistogram hist;
  hist.values.assign(static_cast<std::size_t>(cfg.bins), 0.0);
  std::size_t total = 0;
  for (int y = m; y <= img.height() - 1 - m; ++y) {
    for (int x = m; x <= img.width() - 1 - m; ++x) {
      if (patch.mask) {
        const Mask& mask = *patch.mask;
        const bool covered = std::all_of(
            sampler.support().begin(), sampler.support().end(),
            [&](const auto& o) { return mask(x + o.first, y + o.second) != 0; });
        if (!covered) continue;
      }
      hist.values[sampler.code(img, x, y) / width] += 1.0;
      ++total;
    }
  }
  if (total == 0) throw Error(ErrorKind::Degenerate, "patch has no valid LBP centers");
  if (normalize) {
    for (double& v : hist.values) v /= static_cast<double>(total);
    hist.normalized = true;
  }
  return hist;
}

}  // namespace texroi
