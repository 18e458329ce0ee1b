#include "texroi/folds.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "texroi/error.hpp"

namespace texroi {

int FoldAssignment::fold(const std::string& knee_id) const {
  const auto it = fold_of.find(knee_id);
  if (it == fold_of.end()) throw Error(ErrorKind::Invalid, "knee '" + knee_id + "' has no fold");
  return it->second;
}

std::vector<std::string> FoldAssignment::members(int f, const std::vector<std::string>& order) const {
  std::vector<std::string> out;
  for (const auto& id : order)
    if (fold(id) == f) out.push_back(id);
  return out;
}

std::uint64_t FoldAssignment::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
  };
  for (const auto& [id, f] : fold_of) mix(id + ":" + std::to_string(f) + "\n");
  return h;
}

namespace {

struct Group {
  std::string subject;
  std::vector<std::string> knees;
  long pos = 0;
};

}  // namespace

FoldAssignment stratified_subject_kfold(const std::vector<FoldItem>& items, int k, std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::Invalid, "fold count must be at least 2");
  std::vector<Group> groups;
  std::map<std::string, std::size_t> index;
  for (const auto& it : items) {
    auto [pos, fresh] = index.emplace(it.subject_id, groups.size());
    if (fresh) groups.push_back({it.subject_id, {}, 0});
    auto& g = groups[pos->second];
    g.knees.push_back(it.knee_id);
    g.pos += it.label;
  }
  const auto with_pos = std::count_if(groups.begin(), groups.end(), [](const Group& g) { return g.pos > 0; });
  const auto with_neg = std::count_if(groups.begin(), groups.end(), [](const Group& g) {
    return static_cast<long>(g.knees.size()) > g.pos;
  });
  if (with_pos < k || with_neg < k)
    throw Error(ErrorKind::Invalid, "need at least " + std::to_string(k) +
                                        " subjects with positive and with negative knees for " +
                                        std::to_string(k) + " folds");

  // deterministic shuffle: sort by subject first so input order does not matter
  std::sort(groups.begin(), groups.end(), [](const Group& a, const Group& b) { return a.subject < b.subject; });
  std::mt19937_64 rng(seed);
  std::shuffle(groups.begin(), groups.end(), rng);
  std::stable_partition(groups.begin(), groups.end(), [](const Group& g) { return g.pos > 0; });

  long total = 0, total_pos = 0;
  for (const auto& g : groups) {
    total += static_cast<long>(g.knees.size());
    total_pos += g.pos;
  }
  const double kd = static_cast<double>(k);
  const double target_pos = static_cast<double>(total_pos) / kd;
  const double target_neg = static_cast<double>(total - total_pos) / kd;
  const double target_all = static_cast<double>(total) / kd;
  std::vector<long> n_pos(static_cast<std::size_t>(k), 0), n_all(static_cast<std::size_t>(k), 0);

  FoldAssignment out;
  out.k = k;
  out.seed = seed;
  for (const auto& g : groups) {
    int best = 0;
    double best_primary = -INFINITY, best_total = -INFINITY;
    for (int f = 0; f < k; ++f) {
      const auto fi = static_cast<std::size_t>(f);
      const double primary = g.pos > 0 ? target_pos - static_cast<double>(n_pos[fi])
                                       : target_neg - static_cast<double>(n_all[fi] - n_pos[fi]);
      const double total_def = target_all - static_cast<double>(n_all[fi]);
      if (primary > best_primary || (primary == best_primary && total_def > best_total)) {
        best = f;
        best_primary = primary;
        best_total = total_def;
      }
    }
    n_pos[static_cast<std::size_t>(best)] += g.pos;
    n_all[static_cast<std::size_t>(best)] += static_cast<long>(g.knees.size());
    for (const auto& id : g.knees) out.fold_of[id] = best;
  }
  for (int f = 0; f < k; ++f)
    if (n_all[static_cast<std::size_t>(f)] == 0) throw Error(ErrorKind::Invalid, "empty fold produced");
  return out;
}

FoldAssignment stratified_subject_kfold(const Dataset& ds, int k, std::uint64_t seed) {
  std::vector<FoldItem> items;
  items.reserve(ds.size());
  for (const auto& s : ds.samples()) items.push_back({s.knee_id, s.subject_id, s.label});
  return stratified_subject_kfold(items, k, seed);
}

FoldAudit audit_folds(const Dataset& ds, const FoldAssignment& folds) {
  FoldAudit a;
  a.fold_sizes.assign(static_cast<std::size_t>(folds.k), 0);
  a.fold_positives.assign(static_cast<std::size_t>(folds.k), 0);
  std::map<std::string, std::set<int>> subject_folds;
  for (const auto& s : ds.samples()) {
    const int f = folds.fold(s.knee_id);
    subject_folds[s.subject_id].insert(f);
    a.fold_sizes[static_cast<std::size_t>(f)]++;
    a.fold_positives[static_cast<std::size_t>(f)] += static_cast<std::size_t>(s.label);
  }
  for (const auto& [subject, fs] : subject_folds)
    if (fs.size() > 1) a.subject_splits++;
  return a;
}

void write_folds_csv(const std::string& path, const FoldAssignment& folds,
                     const std::vector<std::string>& order) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write '" + path + "'");
  out << "knee_id,fold\n";
  for (const auto& id : order) out << id << ',' << folds.fold(id) << '\n';
}

}  // namespace texroi
