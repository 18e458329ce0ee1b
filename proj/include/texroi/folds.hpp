#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "texroi/dataset.hpp"

namespace texroi {

struct FoldAssignment {
  int k = 0;
  std::uint64_t seed = 0;
  std::map<std::string, int> fold_of;  // knee_id -> fold

  int fold(const std::string& knee_id) const;
  /// Knee ids of fold f in the order given.
  std::vector<std::string> members(int f, const std::vector<std::string>& order) const;
  /// FNV-1a over "knee_id:fold\n" lines in knee id order.
  std::uint64_t hash() const;
};

/// One row of the grouping problem.
struct FoldItem {
  std::string knee_id;
  std::string subject_id;
  int label = 0;
};

/// Subject-wise stratified k-fold. Subjects are shuffled by `seed`; those
/// with positive knees are then placed one by one into the fold furthest
/// below its positive-count target, the rest into the fold furthest below its
/// negative-count target. Ties go to the larger total-count deficit, then to
/// the lower fold index. Throws Invalid when k < 2 or fewer than k subjects
/// carry positives (or negatives).
FoldAssignment stratified_subject_kfold(const std::vector<FoldItem>& items, int k, std::uint64_t seed);
FoldAssignment stratified_subject_kfold(const Dataset& ds, int k, std::uint64_t seed);

struct FoldAudit {
  std::size_t subject_splits = 0;  // subjects whose knees span folds
  std::vector<std::size_t> fold_sizes;
  std::vector<std::size_t> fold_positives;
};

FoldAudit audit_folds(const Dataset& ds, const FoldAssignment& folds);

/// `knee_id,fold` CSV.
void write_folds_csv(const std::string& path, const FoldAssignment& folds,
                     const std::vector<std::string>& order);

}  // namespace texroi
