#include "texroi/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>

#include <png.h>

#include "texroi/error.hpp"

namespace fs = std::filesystem;

namespace texroi {

ImageGrid::ImageGrid(int width, int height, double spacing, double fill)
    : ImageGrid(width, height, spacing,
                std::vector<double>(static_cast<std::size_t>(std::max(width, 0)) *
                                        static_cast<std::size_t>(std::max(height, 0)),
                                    fill)) {}

ImageGrid::ImageGrid(int width, int height, double spacing, std::vector<double> pixels)
    : width_(width), height_(height), spacing_(spacing), pixels_(std::move(pixels)) {
  if (width < 1 || height < 1)
    throw Error(ErrorKind::Invalid, "image dimensions must be positive");
  if (!(spacing > 0.0) || !std::isfinite(spacing))
    throw Error(ErrorKind::Invalid, "pixel spacing must be positive");
  if (pixels_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height))
    throw Error(ErrorKind::Invalid, "pixel buffer size does not match dimensions");
  for (double v : pixels_)
    if (!std::isfinite(v)) throw Error(ErrorKind::Invalid, "image contains non-finite intensity");
}

ImageGrid ImageGrid::crop(int x0, int y0, int w, int h) const {
  if (x0 < 0 || y0 < 0 || w < 1 || h < 1 || x0 + w > width_ || y0 + h > height_)
    throw Error(ErrorKind::Invalid, "crop rectangle outside image");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) out.push_back((*this)(x, y));
  return ImageGrid(w, h, spacing_, std::move(out));
}

double sample_bilinear(const ImageGrid& img, double x, double y) {
  const double cx = std::clamp(x, 0.0, static_cast<double>(img.width() - 1));
  const double cy = std::clamp(y, 0.0, static_cast<double>(img.height() - 1));
  const int x0 = static_cast<int>(std::floor(cx));
  const int y0 = static_cast<int>(std::floor(cy));
  const int x1 = std::min(x0 + 1, img.width() - 1);
  const int y1 = std::min(y0 + 1, img.height() - 1);
  const double tx = cx - x0;
  const double ty = cy - y0;
  // lerp form keeps constant regions and integer positions exact
  const double top = img(x0, y0) + tx * (img(x1, y0) - img(x0, y0));
  const double bottom = img(x0, y1) + tx * (img(x1, y1) - img(x0, y1));
  return top + ty * (bottom - top);
}

// ---------------------------------------------------------------------------
// File I/O

namespace {

ImageGrid read_pgm(const fs::path& path, double spacing) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open image '" + path.string() + "'");

  auto next_token = [&]() {
    std::string tok;
    char c = 0;
    while (in.get(c)) {
      if (c == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    if (tok.empty()) throw Error(ErrorKind::Parse, "truncated PGM header in '" + path.string() + "'");
    return tok;
  };
  auto next_int = [&]() {
    const std::string tok = next_token();
    try {
      return std::stol(tok);
    } catch (const std::exception&) {
      throw Error(ErrorKind::Parse, "bad PGM header value '" + tok + "' in '" + path.string() + "'");
    }
  };

  const std::string magic = next_token();
  if (magic != "P2" && magic != "P5") {
    if (magic == "P3" || magic == "P6")
      throw Error(ErrorKind::Invalid, "multi-channel image '" + path.string() + "'");
    throw Error(ErrorKind::Parse, "not a PGM file: '" + path.string() + "'");
  }
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535)
    throw Error(ErrorKind::Parse, "bad PGM header in '" + path.string() + "'");

  const auto n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  std::vector<double> px(n);
  if (magic == "P2") {
    for (auto& v : px) v = static_cast<double>(next_int());
  } else {
    const bool wide = maxval > 255;
    std::vector<unsigned char> raw(n * (wide ? 2 : 1));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size())
      throw Error(ErrorKind::Parse, "truncated PGM pixel data in '" + path.string() + "'");
    for (std::size_t i = 0; i < n; ++i)
      px[i] = wide ? static_cast<double>((raw[2 * i] << 8) | raw[2 * i + 1])
                   : static_cast<double>(raw[i]);
  }
  return ImageGrid(static_cast<int>(w), static_cast<int>(h), spacing, std::move(px));
}

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

ImageGrid read_png(const fs::path& path, double spacing) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw Error(ErrorKind::Io, "cannot open image '" + path.string() + "'");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::Io, "libpng initialisation failed");
  }
  std::vector<std::uint8_t> data;
  std::vector<png_bytep> rows;
  png_uint_32 w = 0, h = 0;
  int depth = 0, color = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::Parse, "corrupt PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_get_IHDR(png, info, &w, &h, &depth, &color, nullptr, nullptr, nullptr);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::Invalid, "multi-channel image '" + path.string() + "'");
  }
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const bool wide = depth == 16;
  const std::size_t stride = png_get_rowbytes(png, info);
  data.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = data.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::vector<double> px(static_cast<std::size_t>(w) * h);
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x) {
      const std::uint8_t* row = rows[y];
      px[static_cast<std::size_t>(y) * w + x] =
          wide ? static_cast<double>((row[2 * x] << 8) | row[2 * x + 1])
               : static_cast<double>(row[x]);
    }
  return ImageGrid(static_cast<int>(w), static_cast<int>(h), spacing, std::move(px));
}

bool has_png_signature(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

std::uint16_t to_u16(double v) {
  return static_cast<std::uint16_t>(std::clamp(std::round(v), 0.0, 65535.0));
}

}  // namespace

ImageGrid load_image(const fs::path& path, double spacing) {
  if (!(spacing > 0.0)) throw Error(ErrorKind::Invalid, "pixel spacing must be positive");
  if (!fs::exists(path)) throw Error(ErrorKind::Io, "image not found: '" + path.string() + "'");
  return has_png_signature(path) ? read_png(path, spacing) : read_pgm(path, spacing);
}

void write_pgm(const fs::path& path, const ImageGrid& img, PgmScaling scaling) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
  double lo = 0.0, scale = 1.0;
  if (scaling == PgmScaling::MinMax) {
    const auto [mn, mx] = std::minmax_element(img.pixels().begin(), img.pixels().end());
    lo = *mn;
    scale = *mx > *mn ? 65535.0 / (*mx - *mn) : 0.0;
  }
  out << "P5\n" << img.width() << ' ' << img.height() << "\n65535\n";
  std::vector<char> raw(img.size() * 2);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const std::uint16_t v = to_u16((img.pixels()[i] - lo) * scale);
    raw[2 * i] = static_cast<char>(v >> 8);
    raw[2 * i + 1] = static_cast<char>(v & 0xff);
  }
  out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!out) throw Error(ErrorKind::Io, "failed writing '" + path.string() + "'");
}

void write_png(const fs::path& path, const ImageGrid& img) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::Io, "libpng initialisation failed");
  }
  const auto w = static_cast<std::size_t>(img.width());
  std::vector<std::uint8_t> data(img.size() * 2);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const std::uint16_t v = to_u16(img.pixels()[i]);
    data[2 * i] = static_cast<std::uint8_t>(v >> 8);
    data[2 * i + 1] = static_cast<std::uint8_t>(v & 0xff);
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height()));
  for (std::size_t y = 0; y < rows.size(); ++y) rows[y] = data.data() + y * w * 2;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::Io, "failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()),
               static_cast<png_uint_32>(img.height()), 16, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ---------------------------------------------------------------------------
// Preprocessing

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(ErrorKind::Invalid, "quantile of empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

ImageGrid truncate_percentiles(const ImageGrid& img, double lo_pct, double hi_pct) {
  if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0))
    throw Error(ErrorKind::Invalid, "percentiles must satisfy 0 <= lo < hi <= 100");
  std::vector<double> sorted(img.pixels().begin(), img.pixels().end());
  std::sort(sorted.begin(), sorted.end());
  const double p_lo = quantile_sorted(sorted, lo_pct / 100.0);
  const double p_hi = quantile_sorted(sorted, hi_pct / 100.0);
  if (p_lo == p_hi) throw Error(ErrorKind::FlatImage, "image is flat between the truncation percentiles");
  ImageGrid out = img;
  for (double& v : out.pixels()) v = std::clamp(v, p_lo, p_hi);
  return out;
}

ImageGrid global_contrast_normalize(const ImageGrid& img) {
  const auto px = img.pixels();
  const double n = static_cast<double>(px.size());
  const double mean = std::accumulate(px.begin(), px.end(), 0.0) / n;
  double ss = 0.0;
  double peak = 0.0;
  for (double v : px) {
    ss += (v - mean) * (v - mean);
    peak = std::max(peak, std::abs(v));
  }
  const double sd = std::sqrt(ss / n);
  if (!(sd > 1e-12 * std::max(1.0, peak)))
    throw Error(ErrorKind::FlatImage, "cannot normalize a constant image");
  ImageGrid out = img;
  for (double& v : out.pixels()) v = (v - mean) / sd;
  return out;
}

namespace {

ImageGrid resample_to(const ImageGrid& img, int out_w, int out_h, double step_x, double step_y,
                      double out_spacing) {
  std::vector<double> px(static_cast<std::size_t>(out_w) * static_cast<std::size_t>(out_h));
  for (int y = 0; y < out_h; ++y) {
    const double sy = (y + 0.5) * step_y - 0.5;
    for (int x = 0; x < out_w; ++x) {
      const double sx = (x + 0.5) * step_x - 0.5;
      px[static_cast<std::size_t>(y) * out_w + x] = sample_bilinear(img, sx, sy);
    }
  }
  return ImageGrid(out_w, out_h, out_spacing, std::move(px));
}

}  // namespace

ImageGrid resample(const ImageGrid& img, double target_spacing) {
  if (!(target_spacing > 0.0)) throw Error(ErrorKind::Invalid, "target spacing must be positive");
  const double ratio = img.spacing() / target_spacing;
  const int w = std::max(1, static_cast<int>(std::lround(img.width() * ratio)));
  const int h = std::max(1, static_cast<int>(std::lround(img.height() * ratio)));
  const double step = target_spacing / img.spacing();
  return resample_to(img, w, h, step, step, target_spacing);
}

ImageGrid resize(const ImageGrid& img, int width, int height) {
  if (width < 1 || height < 1) throw Error(ErrorKind::Invalid, "resize dimensions must be positive");
  const double step_x = static_cast<double>(img.width()) / width;
  const double step_y = static_cast<double>(img.height()) / height;
  return resample_to(img, width, height, step_x, step_y, img.spacing() * step_x);
}

ImageGrid hflip(const ImageGrid& img) {
  ImageGrid out = img;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) out(x, y) = img(img.width() - 1 - x, y);
  return out;
}

ImageGrid preprocess(const ImageGrid& img, Side side, const PreprocessConfig& cfg) {
  ImageGrid out = cfg.order == NormalizationOrder::TruncateFirst
                      ? global_contrast_normalize(truncate_percentiles(img, cfg.lo_pct, cfg.hi_pct))
                      : truncate_percentiles(global_contrast_normalize(img), cfg.lo_pct, cfg.hi_pct);
  out = resample(out, cfg.target_spacing);
  return side == Side::Right ? hflip(out) : out;
}

}  // namespace texroi
