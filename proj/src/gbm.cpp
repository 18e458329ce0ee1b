#include "texroi/gbm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "texroi/error.hpp"

namespace texroi {

void GbmConfig::validate() const {
  if (n_trees < 1) throw Error(ErrorKind::Invalid, "gbm n_trees must be >= 1");
  if (max_leaves < 2) throw Error(ErrorKind::Invalid, "gbm max_leaves must be >= 2");
  if (min_samples_leaf < 1) throw Error(ErrorKind::Invalid, "gbm min_samples_leaf must be >= 1");
  if (!(learning_rate > 0.0 && learning_rate <= 1.0))
    throw Error(ErrorKind::Invalid, "gbm learning_rate must be in (0, 1]");
  if (!(l2_reg >= 0.0)) throw Error(ErrorKind::Invalid, "gbm l2_reg must be >= 0");
  if (feature_bins < 2) throw Error(ErrorKind::Invalid, "gbm feature_bins must be >= 2");
}

double Tree::predict(const double* row) const {
  int i = 0;
  while (!nodes[i].is_leaf())
    i = row[nodes[i].feature] <= nodes[i].threshold ? nodes[i].left : nodes[i].right;
  return nodes[i].value;
}

int Tree::leaf_count() const {
  return static_cast<int>(
      std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

std::vector<double> GbmModel::predict_logit(const FeatureMatrix& features) const {
  if (static_cast<std::size_t>(features.cols()) != feature_schema.size())
    throw Error(ErrorKind::Schema, "feature count " + std::to_string(features.cols()) +
                                       " does not match model schema of " +
                                       std::to_string(feature_schema.size()));
  std::vector<double> out(static_cast<std::size_t>(features.rows()), base_score);
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    const double* row = features.data() + r * features.cols();
    for (const auto& t : trees) out[static_cast<std::size_t>(r)] += t.predict(row);
  }
  return out;
}

double sigmoid(double z) noexcept {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

constexpr double kProbFloor = 1e-15;

double clamp_prob(double p) { return std::clamp(p, kProbFloor, 1.0 - kProbFloor); }

// Gains equal up to summation rounding count as ties, so the documented
// lowest-feature/lowest-bin preference is not decided by float noise.
bool clearly_better(double gain, double incumbent) {
  return gain > incumbent + 1e-10 * std::max(1.0, std::abs(incumbent));
}

}  // namespace

double log_loss(std::span<const double> p, std::span<const int> y) {
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = clamp_prob(p[i]);
    sum -= y[i] ? std::log(q) : std::log1p(-q);
  }
  return sum / static_cast<double>(p.size());
}

std::vector<double> predict_gbm(const GbmModel& model, const FeatureMatrix& features) {
  auto out = model.predict_logit(features);
  for (double& v : out) v = clamp_prob(sigmoid(v));
  return out;
}

// ---------------------------------------------------------------------------
// Binning

FeatureBinning FeatureBinning::fit(const FeatureMatrix& x, int max_bins) {
  FeatureBinning fb;
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<double> col(n);
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = x(static_cast<Eigen::Index>(i), j);
    std::sort(col.begin(), col.end());
    std::vector<double> cuts;
    const double top = col.back();
    for (int k = 1; k < max_bins; ++k) {
      // upper value of the k-th equal-frequency bin
      const auto pos = static_cast<std::size_t>(
          (static_cast<std::uint64_t>(k) * n + static_cast<std::uint64_t>(max_bins) - 1) /
          static_cast<std::uint64_t>(max_bins));
      const double c = col[std::max<std::size_t>(pos, 1) - 1];
      if (c < top && (cuts.empty() || c > cuts.back())) cuts.push_back(c);
    }
    // few distinct values: every distinct value below the max becomes a cut
    std::vector<double> uniq;
    std::unique_copy(col.begin(), col.end(), std::back_inserter(uniq));
    if (uniq.size() <= static_cast<std::size_t>(max_bins)) cuts.assign(uniq.begin(), uniq.end() - 1);
    fb.cuts.push_back(std::move(cuts));
  }
  return fb;
}

int FeatureBinning::bin_of(int feature, double value) const {
  const auto& c = cuts[static_cast<std::size_t>(feature)];
  return static_cast<int>(std::lower_bound(c.begin(), c.end(), value) - c.begin());
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Split {
  int feature = -1;
  int bin = -1;
  double gain = 0.0;
};

struct PendingLeaf {
  int node = 0;
  std::vector<int> rows;
  double g = 0.0;
  double h = 0.0;
  Split best;
};

class TreeGrower {
 public:
  TreeGrower(const std::vector<std::vector<std::uint16_t>>& bins, const FeatureBinning& binning,
             const GbmConfig& cfg)
      : bins_(bins), binning_(binning), cfg_(cfg) {}

  Tree grow(const std::vector<double>& grad, const std::vector<double>& hess) {
    Tree tree;
    std::vector<PendingLeaf> leaves;
    PendingLeaf root;
    root.rows.resize(grad.size());
    std::iota(root.rows.begin(), root.rows.end(), 0);
    tree.nodes.emplace_back();
    finish(root, grad, hess);
    leaves.push_back(std::move(root));

    while (static_cast<int>(leaves.size()) < cfg_.max_leaves) {
      int pick = -1;
      for (int i = 0; i < static_cast<int>(leaves.size()); ++i) {
        const auto& b = leaves[static_cast<std::size_t>(i)].best;
        if (b.feature >= 0 && b.gain > 0.0 &&
            (pick < 0 || clearly_better(b.gain, leaves[static_cast<std::size_t>(pick)].best.gain)))
          pick = i;
      }
      if (pick < 0) break;

      PendingLeaf parent = std::move(leaves[static_cast<std::size_t>(pick)]);
      leaves.erase(leaves.begin() + pick);
      const auto& fbins = bins_[static_cast<std::size_t>(parent.best.feature)];
      PendingLeaf left, right;
      for (int r : parent.rows)
        (fbins[static_cast<std::size_t>(r)] <= parent.best.bin ? left : right).rows.push_back(r);

      left.node = static_cast<int>(tree.nodes.size());
      right.node = left.node + 1;
      tree.nodes.emplace_back();
      tree.nodes.emplace_back();
      TreeNode& pn = tree.nodes[static_cast<std::size_t>(parent.node)];
      pn.feature = parent.best.feature;
      pn.threshold = binning_.cuts[static_cast<std::size_t>(parent.best.feature)]
                                  [static_cast<std::size_t>(parent.best.bin)];
      pn.left = left.node;
      pn.right = right.node;

      finish(left, grad, hess);
      finish(right, grad, hess);
      // keep creation order so equal gains favour the older leaf
      leaves.push_back(std::move(left));
      leaves.push_back(std::move(right));
      std::stable_sort(leaves.begin(), leaves.end(),
                       [](const PendingLeaf& a, const PendingLeaf& b) { return a.node < b.node; });
    }
    for (const auto& leaf : leaves)
      tree.nodes[static_cast<std::size_t>(leaf.node)].value =
          -cfg_.learning_rate * leaf.g / (leaf.h + cfg_.l2_reg);
    return tree;
  }

 private:
  void finish(PendingLeaf& leaf, const std::vector<double>& grad, const std::vector<double>& hess) {
    leaf.g = 0.0;
    leaf.h = 0.0;
    for (int r : leaf.rows) {
      leaf.g += grad[static_cast<std::size_t>(r)];
      leaf.h += hess[static_cast<std::size_t>(r)];
    }
    leaf.best = Split{};
    const auto count = static_cast<int>(leaf.rows.size());
    if (count < 2 * cfg_.min_samples_leaf) return;
    const double lambda = cfg_.l2_reg;
    const double parent_score = leaf.g * leaf.g / (leaf.h + lambda);

    for (std::size_t f = 0; f < bins_.size(); ++f) {
      const std::size_t nb = binning_.cuts[f].size() + 1;
      if (nb < 2) continue;
      hg_.assign(nb, 0.0);
      hh_.assign(nb, 0.0);
      hc_.assign(nb, 0);
      const auto& fb = bins_[f];
      for (int r : leaf.rows) {
        const auto b = fb[static_cast<std::size_t>(r)];
        hg_[b] += grad[static_cast<std::size_t>(r)];
        hh_[b] += hess[static_cast<std::size_t>(r)];
        ++hc_[b];
      }
      double gl = 0.0, hl = 0.0;
      int cl = 0;
      for (std::size_t b = 0; b + 1 < nb; ++b) {
        gl += hg_[b];
        hl += hh_[b];
        cl += hc_[b];
        if (cl < cfg_.min_samples_leaf) continue;
        if (count - cl < cfg_.min_samples_leaf) break;
        const double gr = leaf.g - gl, hr = leaf.h - hl;
        const double gain =
            0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent_score);
        if (clearly_better(gain, leaf.best.gain))
          leaf.best = {static_cast<int>(f), static_cast<int>(b), gain};
      }
    }
  }

  const std::vector<std::vector<std::uint16_t>>& bins_;
  const FeatureBinning& binning_;
  const GbmConfig& cfg_;
  std::vector<double> hg_, hh_;
  std::vector<int> hc_;
};

}  // namespace

GbmModel train_gbm(const FeatureMatrix& x, std::span<const int> y, const GbmConfig& cfg,
                   std::vector<std::string> schema, std::vector<double>* loss_trace) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(x.rows());
  const auto d = static_cast<std::size_t>(x.cols());
  if (n < 2) throw Error(ErrorKind::Invalid, "gbm needs at least 2 samples");
  if (y.size() != n) throw Error(ErrorKind::Schema, "label count does not match feature rows");
  if (cfg.feature_bins > 65535) throw Error(ErrorKind::Invalid, "gbm feature_bins must be <= 65535");
  if (!x.allFinite()) throw Error(ErrorKind::Invalid, "gbm features must be finite");
  std::size_t pos = 0;
  for (int v : y) {
    if (v != 0 && v != 1) throw Error(ErrorKind::Invalid, "gbm labels must be 0 or 1");
    pos += static_cast<std::size_t>(v);
  }
  if (pos == 0 || pos == n) throw Error(ErrorKind::Invalid, "gbm labels contain a single class");
  if (schema.empty())
    for (std::size_t j = 0; j < d; ++j) schema.push_back("f" + std::to_string(j));
  if (schema.size() != d) throw Error(ErrorKind::Schema, "feature schema length does not match columns");

  const FeatureBinning binning = FeatureBinning::fit(x, cfg.feature_bins);
  std::vector<std::vector<std::uint16_t>> bins(d, std::vector<std::uint16_t>(n));
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < n; ++i)
      bins[j][i] = static_cast<std::uint16_t>(
          binning.bin_of(static_cast<int>(j), x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))));

  GbmModel model;
  model.feature_schema = std::move(schema);
  const double mean = static_cast<double>(pos) / static_cast<double>(n);
  model.base_score = std::log(mean / (1.0 - mean));

  std::vector<double> raw(n, model.base_score), prob(n), grad(n), hess(n);
  auto refresh = [&] {
    for (std::size_t i = 0; i < n; ++i) prob[i] = sigmoid(raw[i]);
    if (loss_trace) loss_trace->push_back(log_loss(prob, y));
  };
  if (loss_trace) loss_trace->clear();
  refresh();

  TreeGrower grower(bins, binning, cfg);
  for (int t = 0; t < cfg.n_trees; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      grad[i] = prob[i] - y[i];
      hess[i] = prob[i] * (1.0 - prob[i]);
    }
    Tree tree = grower.grow(grad, hess);
    for (std::size_t i = 0; i < n; ++i) raw[i] += tree.predict(x.data() + i * d);
    model.trees.push_back(std::move(tree));
    refresh();
  }
  return model;
}

// ---------------------------------------------------------------------------
// Serialization

std::string serialize_gbm(const GbmModel& model) {
  nlohmann::ordered_json doc;
  doc["version"] = kGbmFormatVersion;
  doc["base_score"] = model.base_score;
  doc["feature_schema"] = model.feature_schema;
  auto trees = nlohmann::ordered_json::array();
  for (const auto& t : model.trees) {
    auto nodes = nlohmann::ordered_json::array();
    for (const auto& n : t.nodes) {
      nlohmann::ordered_json node;
      if (n.is_leaf()) {
        node["leaf"] = n.value;
      } else {
        node["f"] = n.feature;
        node["t"] = n.threshold;
        node["l"] = n.left;
        node["r"] = n.right;
      }
      nodes.push_back(std::move(node));
    }
    trees.push_back(std::move(nodes));
  }
  doc["trees"] = std::move(trees);
  return doc.dump();
}

GbmModel deserialize_gbm(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("gbm model is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("version") || !doc["version"].is_number_integer() ||
      doc["version"].get<int>() != kGbmFormatVersion)
    throw Error(ErrorKind::Version, "gbm model has missing or unsupported version");
  GbmModel model;
  try {
    model.base_score = doc.at("base_score").get<double>();
    model.feature_schema = doc.at("feature_schema").get<std::vector<std::string>>();
    for (const auto& jt : doc.at("trees")) {
      Tree tree;
      for (const auto& jn : jt) {
        TreeNode n;
        if (jn.contains("leaf")) {
          n.value = jn.at("leaf").get<double>();
        } else {
          n.feature = jn.at("f").get<int>();
          n.threshold = jn.at("t").get<double>();
          n.left = jn.at("l").get<int>();
          n.right = jn.at("r").get<int>();
        }
        tree.nodes.push_back(n);
      }
      model.trees.push_back(std::move(tree));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("malformed gbm model: ") + e.what());
  }
  const auto d = static_cast<int>(model.feature_schema.size());
  for (const auto& t : model.trees) {
    const auto size = static_cast<int>(t.nodes.size());
    if (size == 0) throw Error(ErrorKind::Parse, "gbm tree without nodes");
    for (int i = 0; i < size; ++i) {
      const auto& n = t.nodes[static_cast<std::size_t>(i)];
      if (n.is_leaf()) continue;
      if (n.feature >= d) throw Error(ErrorKind::Schema, "tree node references feature outside schema");
      if (n.left <= i || n.right <= i || n.left >= size || n.right >= size)
        throw Error(ErrorKind::Parse, "tree node has invalid child index");
    }
  }
  return model;
}

}  // namespace texroi
