#pragma once

#include <cstdint>
#include <filesystem>

#include "texroi/dataset.hpp"
#include "texroi/image.hpp"
#include "texroi/roi.hpp"

namespace texroi {

struct SynthConfig {
  int n_subjects = 100;
  int knees_per_subject = 2;  // 1 or 2
  double prevalence = 0.173;
  double texture_effect = 1.0;   // amplitude of the positive-class texture near the superior margin
  double clinical_effect = 1.0;  // scales every label dependence of the clinical covariates
  int image_size = 300;          // square, pixels
  double spacing = 0.2;          // mm per pixel
  std::uint64_t seed = 0;

  /// Throws Invalid unless n_subjects >= 10, knees_per_subject in {1,2},
  /// 0 < prevalence < 1, effects >= 0, image_size >= 64 and spacing > 0.
  void validate() const;
};

struct SynthKnee {
  ImageGrid image;  // as stored: right knees are mirrored
  LandmarkSet landmarks;
};

/// Renders one knee: an elliptical patella with random pose, smooth texture
/// and per-knee gain, plus (for label 1) band-limited noise of amplitude
/// proportional to texture_effect in a band along the superior margin.
SynthKnee render_knee(const SynthConfig& cfg, std::uint64_t knee_seed, int label, Side side);

/// Cohort metadata (ids, sides, clinical covariates, labels) without
/// rendering; image and landmark paths point under `out_dir`. This is the
/// manifest generate_cohort writes.
Dataset synth_manifest(const SynthConfig& cfg, const std::filesystem::path& out_dir);

/// Writes images/<knee>.pgm, landmarks/<knee>.txt and manifest.csv under
/// `out_dir` and returns the manifest path. Exactly
/// round(prevalence * knees) knees are positive. Output depends only on cfg.
std::filesystem::path generate_cohort(const SynthConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace texroi
