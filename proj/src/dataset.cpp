#include "texroi/dataset.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <utility>

#include "texroi/error.hpp"

namespace fs = std::filesystem;

namespace texroi {

const char* to_string(Side side) noexcept { return side == Side::Left ? "L" : "R"; }

Dataset::Dataset(std::vector<KneeSample> samples) : samples_(std::move(samples)) {
  if (samples_.empty()) throw Error(ErrorKind::Invalid, "dataset is empty");
  std::set<std::string> ids;
  std::map<std::string, std::pair<int, int>> sides;  // subject -> (left, right)
  for (const auto& s : samples_) {
    if (!ids.insert(s.knee_id).second)
      throw Error(ErrorKind::Invalid, "duplicate knee_id '" + s.knee_id + "'");
    if (s.label != 0 && s.label != 1)
      throw Error(ErrorKind::Invalid, "label for knee '" + s.knee_id + "' is not 0 or 1");
    auto& [left, right] = sides[s.subject_id];
    int& count = s.side == Side::Left ? left : right;
    if (++count > 1)
      throw Error(ErrorKind::Invalid, "subject '" + s.subject_id + "' has two " +
                                          (s.side == Side::Left ? "left" : "right") + " knees");
    positives_ += static_cast<std::size_t>(s.label);
  }
}

std::size_t Dataset::find(std::string_view knee_id) const {
  for (std::size_t i = 0; i < samples_.size(); ++i)
    if (samples_[i].knee_id == knee_id) return i;
  return samples_.size();
}

namespace {

constexpr std::size_t kColumns = 11;
constexpr const char* kColumnNames[kColumns] = {
    "knee_id", "subject_id", "side", "image_path", "landmark_path", "age",
    "sex",     "bmi",        "womac", "kl",        "label"};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void row_error(std::size_t row, std::size_t col, const std::string& msg) {
  throw Error(ErrorKind::Parse, "manifest row " + std::to_string(row) + ", column '" +
                                    kColumnNames[col] + "': " + msg);
}

double parse_real(const std::string& cell, std::size_t row, std::size_t col) {
  if (cell.empty()) row_error(row, col, "missing value");
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v))
    row_error(row, col, "'" + cell + "' is not a finite number");
  return v;
}

int parse_int(const std::string& cell, std::size_t row, std::size_t col) {
  if (cell.empty()) row_error(row, col, "missing value");
  int v = 0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size())
    row_error(row, col, "'" + cell + "' is not an integer");
  return v;
}

}  // namespace

Dataset load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open manifest '" + path.string() + "'");
  const fs::path base = path.parent_path();

  std::string line;
  if (!std::getline(in, line) || trim(line) != kManifestHeader)
    throw Error(ErrorKind::Parse, "manifest '" + path.string() + "' must start with header '" +
                                      std::string(kManifestHeader) + "'");

  std::vector<KneeSample> samples;
  std::unordered_map<std::string, std::size_t> seen;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    auto cells = split_csv(line);
    for (auto& c : cells) c = trim(std::move(c));
    if (cells.size() != kColumns)
      throw Error(ErrorKind::Parse, "manifest row " + std::to_string(row) + ": expected " +
                                        std::to_string(kColumns) + " columns, found " +
                                        std::to_string(cells.size()));
    KneeSample s;
    s.knee_id = cells[0];
    if (s.knee_id.empty()) row_error(row, 0, "missing value");
    s.subject_id = cells[1];
    if (s.subject_id.empty()) row_error(row, 1, "missing value");
    if (cells[2] == "L") {
      s.side = Side::Left;
    } else if (cells[2] == "R") {
      s.side = Side::Right;
    } else {
      row_error(row, 2, "side must be L or R, got '" + cells[2] + "'");
    }
    if (cells[3].empty()) row_error(row, 3, "missing value");
    if (cells[4].empty()) row_error(row, 4, "missing value");
    s.image_path = base / cells[3];
    s.landmark_path = base / cells[4];
    s.clinical.age = parse_real(cells[5], row, 5);
    s.clinical.sex = parse_int(cells[6], row, 6);
    s.clinical.bmi = parse_real(cells[7], row, 7);
    s.clinical.womac = parse_real(cells[8], row, 8);
    s.clinical.kl = parse_int(cells[9], row, 9);
    s.label = parse_int(cells[10], row, 10);
    if (s.label != 0 && s.label != 1)
      row_error(row, 10, "label must be 0 or 1, got " + cells[10]);
    if (auto [it, inserted] = seen.emplace(s.knee_id, row); !inserted)
      throw Error(ErrorKind::Invalid, "duplicate knee_id '" + s.knee_id + "' (rows " +
                                          std::to_string(it->second) + " and " +
                                          std::to_string(row) + ")");
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw Error(ErrorKind::Invalid, "manifest '" + path.string() + "' has no rows");
  return Dataset(std::move(samples));
}

void write_manifest(const fs::path& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write manifest '" + path.string() + "'");
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  auto rel = [&](const fs::path& p) {
    std::error_code ec;
    auto r = fs::relative(p, base, ec);
    return (ec || r.empty()) ? p.generic_string() : r.generic_string();
  };
  out << kManifestHeader << '\n';
  out.precision(17);
  for (const auto& s : ds.samples()) {
    out << s.knee_id << ',' << s.subject_id << ',' << to_string(s.side) << ','
        << rel(s.image_path) << ',' << rel(s.landmark_path) << ',' << s.clinical.age << ','
        << s.clinical.sex << ',' << s.clinical.bmi << ',' << s.clinical.womac << ','
        << s.clinical.kl << ',' << s.label << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "failed writing manifest '" + path.string() + "'");
}

ValidationReport validate_dataset(const Dataset& ds) {
  ValidationReport report;
  auto issue = [&](const KneeSample& s, std::string msg) {
    report.issues.push_back({s.knee_id, std::move(msg)});
  };
  auto readable = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return static_cast<bool>(f);
  };
  for (const auto& s : ds.samples()) {
    if (!readable(s.image_path)) issue(s, "unreadable image '" + s.image_path.string() + "'");
    if (!readable(s.landmark_path))
      issue(s, "unreadable landmarks '" + s.landmark_path.string() + "'");
    const auto& c = s.clinical;
    if (c.kl < 0 || c.kl > 4) issue(s, "kl grade " + std::to_string(c.kl) + " outside 0..4");
    if (c.sex != 0 && c.sex != 1) issue(s, "sex code " + std::to_string(c.sex) + " not 0 or 1");
    if (!(c.age >= 0.0)) issue(s, "age must be >= 0");
    if (!(c.bmi > 0.0)) issue(s, "bmi must be > 0");
    if (!(c.womac >= 0.0)) issue(s, "womac must be >= 0");
  }
  return report;
}

}  // namespace texroi
