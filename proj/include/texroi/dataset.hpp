#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace texroi {

enum class Side { Left, Right };

const char* to_string(Side side) noexcept;

/// Clinical covariates for one knee, in manifest column order.
struct ClinicalRecord {
  double age = 0.0;    // years
  int sex = 0;         // 0 = female, 1 = male
  double bmi = 0.0;    // kg/m^2
  double womac = 0.0;  // WOMAC total score
  int kl = 0;          // Kellgren-Lawrence grade, 0..4
};

struct KneeSample {
  std::string knee_id;
  std::string subject_id;
  Side side = Side::Left;
  std::filesystem::path image_path;     // resolved against the manifest directory
  std::filesystem::path landmark_path;  // resolved against the manifest directory
  ClinicalRecord clinical;
  int label = 0;  // 1 = PFOA
};

/// Ordered, immutable collection of knees.
///
/// Construction rejects empty input, duplicate knee ids, labels outside
/// {0,1}, and subjects that carry more than one knee per side. Clinical
/// range problems are left for validate_dataset() to report.
class Dataset {
 public:
  explicit Dataset(std::vector<KneeSample> samples);

  const std::vector<KneeSample>& samples() const noexcept { return samples_; }
  const KneeSample& operator[](std::size_t i) const { return samples_[i]; }
  std::size_t size() const noexcept { return samples_.size(); }
  std::size_t positives() const noexcept { return positives_; }
  double prevalence() const noexcept {
    return static_cast<double>(positives_) / static_cast<double>(samples_.size());
  }

  /// Index of a knee id, or size() when absent.
  std::size_t find(std::string_view knee_id) const;

 private:
  std::vector<KneeSample> samples_;
  std::size_t positives_ = 0;
};

/// Column order of the manifest header.
inline constexpr std::string_view kManifestHeader =
    "knee_id,subject_id,side,image_path,landmark_path,age,sex,bmi,womac,kl,label";

/// Reads a manifest CSV. Relative paths resolve against the manifest's
/// directory. Throws texroi::Error on a missing file, a malformed row (row
/// number and column named), a duplicate knee id or a label outside {0,1}.
Dataset load_manifest(const std::filesystem::path& path);

/// Writes a manifest with paths relative to `path`'s directory when possible.
void write_manifest(const std::filesystem::path& path, const Dataset& ds);

struct ValidationIssue {
  std::string knee_id;
  std::string message;
};

struct ValidationReport {
  std::vector<ValidationIssue> issues;
  bool ok() const noexcept { return issues.empty(); }
};

/// Collects per-knee problems without throwing: unreadable image or landmark
/// files and clinical values out of range.
ValidationReport validate_dataset(const Dataset& ds);

}  // namespace texroi
