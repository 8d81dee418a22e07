#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

#include "hatelab/error.hpp"
#include "hatelab/features.hpp"
#include "hatelab/random.hpp"

namespace hatelab {

// Feature rows share one dimension; dense inputs are stored sparsely so every
// model runs the same sparse-aware math.
struct Dataset {
  std::size_t dim = 0;
  std::vector<SparseVector> features;
  std::vector<bool> labels;

  std::size_t size() const { return features.size(); }
  bool empty() const { return features.empty(); }

  void validate() const {
    if (features.size() != labels.size()) {
      throw DomainError("dataset: " + std::to_string(features.size()) + " feature rows but " +
                        std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (features[i].dim != dim) {
        throw DomainError("dataset: row " + std::to_string(i) + " has dim " + std::to_string(features[i].dim) +
                          ", expected " + std::to_string(dim));
      }
    }
  }

  bool has_both_classes() const {
    const auto pos = std::count(labels.begin(), labels.end(), true);
    return pos > 0 && static_cast<std::size_t>(pos) < labels.size();
  }

  bool has_negative_values() const {
    for (const auto& f : features) {
      for (const auto& e : f.entries) {
        if (e.value < 0.0) return true;
      }
    }
    return false;
  }

  static Dataset from_sparse(std::vector<SparseVector> rows, std::vector<bool> labels) {
    Dataset d;
    d.dim = rows.empty() ? 0 : rows.front().dim;
    d.features = std::move(rows);
    d.labels = std::move(labels);
    d.validate();
    return d;
  }

  static Dataset from_dense(const std::vector<DenseVector>& rows, std::vector<bool> labels) {
    std::vector<SparseVector> sparse;
    sparse.reserve(rows.size());
    for (const auto& r : rows) sparse.push_back(to_sparse(r));
    return from_sparse(std::move(sparse), std::move(labels));
  }
};

enum class ModelKind { NaiveBayes, LogisticRegression, KNN, LinearSVM, RandomForest };

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::NaiveBayes: return "NaiveBayes";
    case ModelKind::LogisticRegression: return "LogisticRegression";
    case ModelKind::KNN: return "KNN";
    case ModelKind::LinearSVM: return "LinearSVM";
    case ModelKind::RandomForest: return "RandomForest";
  }
  return "?";
}

inline std::optional<ModelKind> parse_model_kind(std::string_view s) {
  for (const auto k : {ModelKind::NaiveBayes, ModelKind::LogisticRegression, ModelKind::KNN, ModelKind::LinearSVM,
                       ModelKind::RandomForest}) {
    if (s == to_string(k)) return k;
  }
  return std::nullopt;
}

// Index 0 is the negative class, 1 the positive class.
struct NaiveBayesParams {
  double alpha = 1.0;
  std::array<double, 2> log_prior{};
  std::array<std::vector<double>, 2> log_likelihood;

  friend bool operator==(const NaiveBayesParams&, const NaiveBayesParams&) = default;
};

struct LinearParams {
  std::vector<double> weights;
  double bias = 0.0;

  double score(const SparseVector& x) const { return dot(x, weights) + bias; }
  friend bool operator==(const LinearParams&, const LinearParams&) = default;
};

struct KnnParams {
  Dataset train;
  std::size_t k = 5;

  friend bool operator==(const KnnParams& a, const KnnParams& b) {
    return a.k == b.k && a.train.dim == b.train.dim && a.train.features == b.train.features &&
           a.train.labels == b.train.labels;
  }
};

// Internal nodes have feature >= 0 and route x[feature] <= threshold left.
// Leaves keep the class counts of the (bootstrap) samples that reached them.
struct TreeNode {
  std::int64_t feature = -1;
  double threshold = 0.0;
  std::int64_t left = -1;
  std::int64_t right = -1;
  std::array<std::uint64_t, 2> counts{};

  bool is_leaf() const { return feature < 0; }
  friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  const TreeNode& leaf_for(const SparseVector& x) const {
    std::size_t i = 0;
    while (!nodes[i].is_leaf()) {
      const auto& n = nodes[i];
      i = static_cast<std::size_t>(x.at(static_cast<std::size_t>(n.feature)) <= n.threshold ? n.left : n.right);
    }
    return nodes[i];
  }

  // Majority of the leaf; a tie goes to the negative class.
  bool predict(const SparseVector& x) const {
    const auto& leaf = leaf_for(x);
    return leaf.counts[1] > leaf.counts[0];
  }

  std::size_t depth() const {
    std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
    std::size_t best = 0;
    while (!stack.empty()) {
      const auto [i, d] = stack.back();
      stack.pop_back();
      best = std::max(best, d);
      if (!nodes[i].is_leaf()) {
        stack.emplace_back(static_cast<std::size_t>(nodes[i].left), d + 1);
        stack.emplace_back(static_cast<std::size_t>(nodes[i].right), d + 1);
      }
    }
    return best;
  }

  friend bool operator==(const DecisionTree&, const DecisionTree&) = default;
};

struct ForestParams {
  std::vector<DecisionTree> trees;
  friend bool operator==(const ForestParams&, const ForestParams&) = default;
};

struct TrainedModel {
  ModelKind kind = ModelKind::LogisticRegression;
  std::size_t dim = 0;
  std::variant<NaiveBayesParams, LinearParams, KnnParams, ForestParams> params;

  friend bool operator==(const TrainedModel&, const TrainedModel&) = default;
};

// ---------------------------------------------------------------------------
// Naive Bayes

struct NaiveBayesOptions {
  double alpha = 1.0;
};

// Multinomial: P(t|c) = (count(t,c) + alpha) / (total(c) + alpha * V).
inline TrainedModel nb_fit(const Dataset& data, double alpha = 1.0) {
  data.validate();
  if (!(alpha > 0.0)) throw DomainError("naive bayes: alpha must be > 0");
  if (data.empty()) throw DomainError("naive bayes: empty dataset");
  if (!data.has_both_classes()) throw DomainError("naive bayes: training data must contain both classes");
  if (data.has_negative_values()) {
    throw DomainError("naive bayes requires all inputs to have non-negative values (negative features found)");
  }
  const std::size_t v = data.dim;
  std::array<std::vector<double>, 2> counts{std::vector<double>(v, 0.0), std::vector<double>(v, 0.0)};
  std::array<double, 2> totals{0.0, 0.0};
  std::array<std::size_t, 2> docs{0, 0};
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int c = data.labels[i] ? 1 : 0;
    ++docs[c];
    for (const auto& e : data.features[i].entries) {
      counts[c][e.index] += e.value;
      totals[c] += e.value;
    }
  }
  NaiveBayesParams p;
  p.alpha = alpha;
  const double n = static_cast<double>(data.size());
  for (int c = 0; c < 2; ++c) {
    p.log_prior[c] = std::log(static_cast<double>(docs[c]) / n);
    const double denom = totals[c] + alpha * static_cast<double>(v);
    p.log_likelihood[c].resize(v);
    for (std::size_t t = 0; t < v; ++t) p.log_likelihood[c][t] = std::log((counts[c][t] + alpha) / denom);
  }
  return TrainedModel{ModelKind::NaiveBayes, v, std::move(p)};
}

// Unnormalised log posteriors (negative, positive).
inline std::array<double, 2> nb_log_posteriors(const NaiveBayesParams& p, const SparseVector& x) {
  std::array<double, 2> s = p.log_prior;
  for (const auto& e : x.entries) {
    s[0] += e.value * p.log_likelihood[0][e.index];
    s[1] += e.value * p.log_likelihood[1][e.index];
  }
  return s;
}

// Scores within 1e-12 relative are treated as an exact tie, which goes to the
// negative class.
inline bool nb_decide(const std::array<double, 2>& s) {
  const double scale = std::max(1.0, std::abs(s[0]) + std::abs(s[1]));
  return s[1] - s[0] > 1e-12 * scale;
}

// ---------------------------------------------------------------------------
// Linear models

namespace detail {

inline double signed_label(bool y) { return y ? 1.0 : -1.0; }

// log(1 + exp(-m)) without overflow.
inline double logistic_loss(double margin) {
  return margin > 0.0 ? std::log1p(std::exp(-margin)) : -margin + std::log1p(std::exp(margin));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline void check_linear_inputs(const Dataset& data, std::size_t epochs, std::string_view who) {
  data.validate();
  if (data.empty()) throw DomainError(std::string(who) + ": empty dataset");
  if (epochs < 1) throw DomainError(std::string(who) + ": epochs must be >= 1");
}

}  // namespace detail

struct LinearGradient {
  std::vector<double> weights;
  double bias = 0.0;
};

// Mean logistic loss plus (l2/2)||w||^2; the bias is not regularised.
inline double logreg_objective(const Dataset& data, const LinearParams& m, double l2) {
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    loss += detail::logistic_loss(detail::signed_label(data.labels[i]) * m.score(data.features[i]));
  }
  loss /= static_cast<double>(data.size());
  double wn = 0.0;
  for (const double w : m.weights) wn += w * w;
  return loss + 0.5 * l2 * wn;
}

inline LinearGradient logreg_gradient(const Dataset& data, const LinearParams& m, double l2) {
  LinearGradient g{std::vector<double>(m.weights.size(), 0.0), 0.0};
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double y = data.labels[i] ? 1.0 : 0.0;
    const double r = (detail::sigmoid(m.score(data.features[i])) - y) * inv_n;
    for (const auto& e : data.features[i].entries) g.weights[e.index] += r * e.value;
    g.bias += r;
  }
  for (std::size_t j = 0; j < g.weights.size(); ++j) g.weights[j] += l2 * m.weights[j];
  return g;
}

// lambda||w||^2 plus mean hinge loss max(0, 1 - y f(x)).
inline double svm_objective(const Dataset& data, const LinearParams& m, double lambda) {
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    loss += std::max(0.0, 1.0 - detail::signed_label(data.labels[i]) * m.score(data.features[i]));
  }
  loss /= static_cast<double>(data.size());
  double wn = 0.0;
  for (const double w : m.weights) wn += w * w;
  return loss + lambda * wn;
}

// Subgradient; at a kink (margin exactly 1) the hinge term contributes zero.
inline LinearGradient svm_subgradient(const Dataset& data, const LinearParams& m, double lambda) {
  LinearGradient g{std::vector<double>(m.weights.size(), 0.0), 0.0};
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double y = detail::signed_label(data.labels[i]);
    if (y * m.score(data.features[i]) < 1.0) {
      for (const auto& e : data.features[i].entries) g.weights[e.index] -= y * e.value * inv_n;
      g.bias -= y * inv_n;
    }
  }
  for (std::size_t j = 0; j < g.weights.size(); ++j) g.weights[j] += 2.0 * lambda * m.weights[j];
  return g;
}

struct LogRegOptions {
  double lr = 1.0;
  double l2 = 1e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  std::uint64_t seed = 42;
};

struct SvmOptions {
  double lambda = 1e-4;
  std::size_t epochs = 30;
  double lr = 0.5;  // epoch e uses lr / sqrt(1 + e)
  std::size_t batch_size = 16;
  std::uint64_t seed = 42;
};

namespace detail {

enum class LinearLoss { Logistic, Hinge };

// Mini-batch descent with an implicit (proximal) L2 step,
// w <- (w - step * g_data) / (1 + step * reg), which is stable for any reg.
inline LinearParams fit_linear(const Dataset& data, LinearLoss loss, double base_lr, double reg,
                               std::size_t epochs, std::size_t batch_size, std::uint64_t seed, bool decay,
                               std::string_view who) {
  check_linear_inputs(data, epochs, who);
  if (!(base_lr > 0.0)) throw DomainError(std::string(who) + ": learning rate must be > 0");
  if (reg < 0.0) throw DomainError(std::string(who) + ": regularisation must be >= 0");
  if (batch_size == 0) batch_size = 1;
  LinearParams m{std::vector<double>(data.dim, 0.0), 0.0};
  std::vector<std::size_t> order(data.size());
  std::unordered_map<std::size_t, double> gw;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, epoch));
    rng.shuffle(std::span<std::size_t>(order));
    const double step = decay ? base_lr / std::sqrt(1.0 + static_cast<double>(epoch)) : base_lr;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      gw.clear();
      double gb = 0.0;
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& x = data.features[order[k]];
        const double y = signed_label(data.labels[order[k]]);
        const double z = m.score(x);
        double r = 0.0;  // d loss / d z
        if (loss == LinearLoss::Logistic) {
          batch_loss += logistic_loss(y * z);
          r = sigmoid(z) - (y > 0 ? 1.0 : 0.0);
        } else {
          batch_loss += std::max(0.0, 1.0 - y * z);
          r = (y * z < 1.0) ? -y : 0.0;
        }
        if (r == 0.0) continue;
        for (const auto& e : x.entries) gw[e.index] += r * e.value * inv_b;
        gb += r * inv_b;
      }
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError(std::string(who) + ": loss became non-finite at epoch " + std::to_string(epoch) +
                              "; try a smaller learning rate");
      }
      for (const auto& [j, g] : gw) m.weights[j] -= step * g;
      if (reg > 0.0) {
        const double shrink = 1.0 / (1.0 + step * reg);
        for (auto& w : m.weights) w *= shrink;
      }
      m.bias -= step * gb;
    }
    for (const double w : m.weights) {
      if (!std::isfinite(w)) {
        throw DivergenceError(std::string(who) + ": weights became non-finite at epoch " + std::to_string(epoch) +
                              "; try a smaller learning rate");
      }
    }
  }
  return m;
}

}  // namespace detail

inline TrainedModel logreg_fit(const Dataset& data, const LogRegOptions& opt = {}) {
  auto m = detail::fit_linear(data, detail::LinearLoss::Logistic, opt.lr, opt.l2, opt.epochs, opt.batch_size,
                              opt.seed, false, "logistic regression");
  return TrainedModel{ModelKind::LogisticRegression, data.dim, std::move(m)};
}

inline TrainedModel svm_fit(const Dataset& data, const SvmOptions& opt = {}) {
  if (opt.lambda < 0.0) throw DomainError("linear svm: lambda must be >= 0");
  auto m = detail::fit_linear(data, detail::LinearLoss::Hinge, opt.lr, 2.0 * opt.lambda, opt.epochs,
                              opt.batch_size, opt.seed, true, "linear svm");
  return TrainedModel{ModelKind::LinearSVM, data.dim, std::move(m)};
}

// ---------------------------------------------------------------------------
// k-nearest neighbours

inline void check_knn(std::size_t n_train, std::size_t k) {
  if (k == 0 || k % 2 == 0) throw DomainError("knn: k must be a positive odd integer, got " + std::to_string(k));
  if (k > n_train) {
    throw DomainError("knn: k=" + std::to_string(k) + " exceeds training size " + std::to_string(n_train));
  }
}

// Euclidean distance; among equal distances the lower training index wins.
inline bool knn_predict(const Dataset& train, std::size_t k, const SparseVector& query) {
  check_knn(train.size(), k);
  if (query.dim != train.dim) throw DomainError("knn: query dim mismatch");
  std::vector<std::pair<double, std::size_t>> d;
  d.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) d.emplace_back(squared_distance(train.features[i], query), i);
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::size_t pos = 0;
  for (std::size_t j = 0; j < k; ++j) pos += train.labels[d[j].second] ? 1 : 0;
  return 2 * pos > k;
}

inline TrainedModel knn_fit(const Dataset& data, std::size_t k = 5) {
  data.validate();
  check_knn(data.size(), k);
  return TrainedModel{ModelKind::KNN, data.dim, KnnParams{data, k}};
}

// ---------------------------------------------------------------------------
// Random forest

struct ForestOptions {
  std::size_t n_trees = 100;
  std::size_t max_depth = 16;
  bool bootstrap = true;
  std::size_t max_features = 0;  // 0 = ceil(sqrt(dim))
  std::uint64_t seed = 42;
};

namespace detail {

inline double gini(double neg, double pos) {
  const double n = neg + pos;
  if (n <= 0.0) return 0.0;
  const double p0 = neg / n, p1 = pos / n;
  return 1.0 - p0 * p0 - p1 * p1;
}

// Draws distinct feature ids from [0, n) in random order without
// materialising the whole permutation (sparse Fisher-Yates).
class FeatureSampler {
 public:
  FeatureSampler(Rng& rng, std::size_t n) : rng_(rng), n_(n) {}

  bool exhausted() const { return drawn_ == n_; }

  std::size_t next() {
    const std::size_t j = drawn_ + static_cast<std::size_t>(rng_.below(n_ - drawn_));
    const std::size_t at_j = value_at(j);
    swapped_[j] = value_at(drawn_);
    ++drawn_;
    return at_j;
  }

 private:
  std::size_t value_at(std::size_t i) const {
    const auto it = swapped_.find(i);
    return it == swapped_.end() ? i : it->second;
  }

  Rng& rng_;
  std::size_t n_;
  std::size_t drawn_ = 0;
  std::unordered_map<std::size_t, std::size_t> swapped_;
};

// Grows one tree. Every node draws its features from an RNG keyed by its
// heap position, so growing deeper only refines existing leaves.
class TreeBuilder {
 public:
  TreeBuilder(const Dataset& data, std::size_t max_depth, std::size_t max_features, std::uint64_t tree_seed)
      : data_(data), max_depth_(max_depth), max_features_(max_features), seed_(tree_seed) {
    multiplicity_.assign(data.size(), 0);
  }

  void set_columns(const std::vector<std::vector<SparseEntry>>* columns) { columns_ptr_ = columns; }

  DecisionTree build(const std::vector<std::size_t>& samples) {
    DecisionTree tree;
    tree.nodes.emplace_back();
    grow(tree, 0, samples, 0, 1);
    return tree;
  }

 private:
  struct Split {
    std::size_t feature = 0;
    double threshold = 0.0;
    double impurity = 0.0;
  };

  std::optional<Split> best_split_for(std::size_t feature, const std::vector<std::size_t>& samples,
                                      const std::array<double, 2>& totals) {
    values_.clear();
    double nonzero_neg = 0.0, nonzero_pos = 0.0;
    const auto& column = (*columns_ptr_)[feature];
    if (column.empty()) return std::nullopt;
    if (samples.size() * 4 < column.size()) {
      for (const auto s : samples) {
        const double x = data_.features[s].at(feature);
        if (x != 0.0) {
          values_.push_back({x, data_.labels[s], 1.0});
          (data_.labels[s] ? nonzero_pos : nonzero_neg) += 1.0;
        }
      }
    } else {
      for (const auto& e : column) {
        const auto mult = multiplicity_[e.index];
        if (mult == 0) continue;
        const bool y = data_.labels[e.index];
        values_.push_back({e.value, y, static_cast<double>(mult)});
        (y ? nonzero_pos : nonzero_neg) += static_cast<double>(mult);
      }
    }
    const double zero_neg = totals[0] - nonzero_neg;
    const double zero_pos = totals[1] - nonzero_pos;
    if (zero_neg > 0.0) values_.push_back({0.0, false, zero_neg});
    if (zero_pos > 0.0) values_.push_back({0.0, true, zero_pos});
    std::sort(values_.begin(), values_.end(), [](const Item& a, const Item& b) { return a.x < b.x; });

    const double n = totals[0] + totals[1];
    std::optional<Split> best;
    std::array<double, 2> left{0.0, 0.0};
    for (std::size_t i = 0; i + 1 < values_.size(); ++i) {
      left[values_[i].y ? 1 : 0] += values_[i].w;
      if (values_[i].x == values_[i + 1].x) continue;
      const double nl = left[0] + left[1];
      const double nr = n - nl;
      if (nl <= 0.0 || nr <= 0.0) continue;
      const double imp = (nl * gini(left[0], left[1]) + nr * gini(totals[0] - left[0], totals[1] - left[1])) / n;
      if (!best || imp < best->impurity) {
        best = Split{feature, 0.5 * (values_[i].x + values_[i + 1].x), imp};
      }
    }
    return best;
  }

  void grow(DecisionTree& tree, std::size_t node, const std::vector<std::size_t>& samples, std::size_t depth,
            std::uint64_t path_id) {
    std::array<double, 2> totals{0.0, 0.0};
    std::array<std::uint64_t, 2> counts{0, 0};
    for (const auto s : samples) ++counts[data_.labels[s] ? 1 : 0];
    totals = {static_cast<double>(counts[0]), static_cast<double>(counts[1])};
    tree.nodes[node].counts = counts;
    if (counts[0] == 0 || counts[1] == 0 || depth >= max_depth_ || samples.size() < 2) return;

    // Evaluate max_features random features. If none of them separates the
    // node, fall back to the features that are nonzero somewhere in the node
    // (any other feature is constant there), in random order, until one does.
    Rng rng(derive_seed(seed_, path_id));
    for (const auto s : samples) ++multiplicity_[s];
    std::optional<Split> best;
    {
      FeatureSampler sampler(rng, data_.dim);
      for (std::size_t k = 0; k < max_features_ && !sampler.exhausted(); ++k) {
        const auto cand = best_split_for(sampler.next(), samples, totals);
        if (cand && (!best || cand->impurity < best->impurity)) best = cand;
      }
    }
    if (!best) {
      std::vector<std::size_t> active;
      for (const auto s : samples) {
        for (const auto& e : data_.features[s].entries) active.push_back(e.index);
      }
      std::sort(active.begin(), active.end());
      active.erase(std::unique(active.begin(), active.end()), active.end());
      FeatureSampler sampler(rng, active.size());
      while (!best && !sampler.exhausted()) best = best_split_for(active[sampler.next()], samples, totals);
    }
    for (const auto s : samples) --multiplicity_[s];
    if (!best) return;

    std::vector<std::size_t> left, right;
    for (const auto s : samples) {
      (data_.features[s].at(best->feature) <= best->threshold ? left : right).push_back(s);
    }
    const auto li = tree.nodes.size();
    tree.nodes.emplace_back();
    const auto ri = tree.nodes.size();
    tree.nodes.emplace_back();
    tree.nodes[node].feature = static_cast<std::int64_t>(best->feature);
    tree.nodes[node].threshold = best->threshold;
    tree.nodes[node].left = static_cast<std::int64_t>(li);
    tree.nodes[node].right = static_cast<std::int64_t>(ri);
    grow(tree, li, left, depth + 1, path_id * 2);
    grow(tree, ri, right, depth + 1, path_id * 2 + 1);
  }

  struct Item {
    double x;
    bool y;
    double w;
  };

  const Dataset& data_;
  std::size_t max_depth_;
  std::size_t max_features_;
  std::uint64_t seed_;
  const std::vector<std::vector<SparseEntry>>* columns_ptr_ = nullptr;
  std::vector<std::uint32_t> multiplicity_;
  std::vector<Item> values_;
};

// Column-major copy: column f lists (row, value) for nonzero entries.
inline std::vector<std::vector<SparseEntry>> build_columns(const Dataset& data) {
  std::vector<std::vector<SparseEntry>> cols(data.dim);
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (const auto& e : data.features[r].entries) cols[e.index].push_back({r, e.value});
  }
  return cols;
}

}  // namespace detail

inline TrainedModel rf_fit(const Dataset& data, const ForestOptions& opt = {}) {
  data.validate();
  if (data.empty()) throw DomainError("random forest: empty dataset");
  if (opt.n_trees < 1) throw DomainError("random forest: n_trees must be >= 1");
  if (data.dim == 0) throw DomainError("random forest: zero-dimensional features");
  const std::size_t max_features = opt.max_features > 0
                                       ? opt.max_features
                                       : static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(data.dim))));
  const auto columns = detail::build_columns(data);
  ForestParams forest;
  forest.trees.reserve(opt.n_trees);
  for (std::size_t t = 0; t < opt.n_trees; ++t) {
    const auto tree_seed = derive_seed(opt.seed, t);
    std::vector<std::size_t> samples(data.size());
    if (opt.bootstrap) {
      Rng rng(derive_seed(tree_seed, 0));
      for (auto& s : samples) s = static_cast<std::size_t>(rng.below(data.size()));
      std::sort(samples.begin(), samples.end());
    } else {
      std::iota(samples.begin(), samples.end(), std::size_t{0});
    }
    detail::TreeBuilder builder(data, opt.max_depth, max_features, tree_seed);
    builder.set_columns(&columns);
    forest.trees.push_back(builder.build(samples));
  }
  return TrainedModel{ModelKind::RandomForest, data.dim, std::move(forest)};
}

// ---------------------------------------------------------------------------
// Uniform prediction surface

inline bool predict(const TrainedModel& model, const SparseVector& x) {
  if (x.dim != model.dim) {
    throw DomainError("predict: feature dim " + std::to_string(x.dim) + " does not match model dim " +
                      std::to_string(model.dim));
  }
  return std::visit(
      [&](const auto& p) -> bool {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, NaiveBayesParams>) {
          return nb_decide(nb_log_posteriors(p, x));
        } else if constexpr (std::is_same_v<P, LinearParams>) {
          return p.score(x) > 0.0;
        } else if constexpr (std::is_same_v<P, KnnParams>) {
          return knn_predict(p.train, p.k, x);
        } else {
          std::size_t votes = 0;
          for (const auto& t : p.trees) votes += t.predict(x) ? 1 : 0;
          return 2 * votes > p.trees.size();
        }
      },
      model.params);
}

inline bool predict(const TrainedModel& model, const DenseVector& x) { return predict(model, to_sparse(x)); }

inline std::vector<bool> predict_batch(const TrainedModel& model, const std::vector<SparseVector>& xs) {
  std::vector<bool> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(predict(model, x));
  return out;
}

inline std::vector<bool> predict_batch(const TrainedModel& model, const std::vector<DenseVector>& xs) {
  std::vector<bool> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(predict(model, x));
  return out;
}

// ---------------------------------------------------------------------------
// Serialization: a self-describing JSON document. nlohmann/json writes doubles
// with max_digits10, so floats round-trip bit-exactly.

namespace detail {

inline nlohmann::json sparse_to_json(const SparseVector& v) {
  nlohmann::json idx = nlohmann::json::array(), val = nlohmann::json::array();
  for (const auto& e : v.entries) {
    idx.push_back(e.index);
    val.push_back(e.value);
  }
  return {{"i", idx}, {"v", val}};
}

inline SparseVector sparse_from_json(const nlohmann::json& j, std::size_t dim) {
  SparseVector v;
  v.dim = dim;
  const auto& idx = j.at("i");
  const auto& val = j.at("v");
  if (idx.size() != val.size()) throw ParseError("model file: sparse row index/value length mismatch");
  for (std::size_t k = 0; k < idx.size(); ++k) v.entries.push_back({idx[k].get<std::size_t>(), val[k].get<double>()});
  if (!v.valid()) throw ParseError("model file: invalid sparse row");
  return v;
}

}  // namespace detail

inline nlohmann::json model_to_json(const TrainedModel& m) {
  nlohmann::json j;
  j["format"] = "hatelab-model";
  j["version"] = 1;
  j["kind"] = to_string(m.kind);
  j["dim"] = m.dim;
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, NaiveBayesParams>) {
          j["alpha"] = p.alpha;
          j["log_prior"] = p.log_prior;
          j["log_likelihood"] = p.log_likelihood;
        } else if constexpr (std::is_same_v<P, LinearParams>) {
          j["weights"] = p.weights;
          j["bias"] = p.bias;
        } else if constexpr (std::is_same_v<P, KnnParams>) {
          j["k"] = p.k;
          nlohmann::json rows = nlohmann::json::array();
          for (const auto& r : p.train.features) rows.push_back(detail::sparse_to_json(r));
          j["train"] = rows;
          j["labels"] = p.train.labels;
        } else {
          nlohmann::json trees = nlohmann::json::array();
          for (const auto& t : p.trees) {
            nlohmann::json nodes = nlohmann::json::array();
            for (const auto& n : t.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.counts[0], n.counts[1]});
            trees.push_back(nodes);
          }
          j["trees"] = trees;
        }
      },
      m.params);
  return j;
}

inline TrainedModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "hatelab-model") throw ParseError("model file: unknown format tag");
    TrainedModel m;
    const auto kind = parse_model_kind(j.at("kind").get<std::string>());
    if (!kind) throw ParseError("model file: unknown kind " + j.at("kind").dump());
    m.kind = *kind;
    m.dim = j.at("dim").get<std::size_t>();
    switch (m.kind) {
      case ModelKind::NaiveBayes: {
        NaiveBayesParams p;
        p.alpha = j.at("alpha").get<double>();
        p.log_prior = j.at("log_prior").get<std::array<double, 2>>();
        p.log_likelihood = j.at("log_likelihood").get<std::array<std::vector<double>, 2>>();
        if (p.log_likelihood[0].size() != m.dim || p.log_likelihood[1].size() != m.dim) {
          throw ParseError("model file: likelihood shape does not match dim");
        }
        m.params = std::move(p);
        break;
      }
      case ModelKind::LogisticRegression:
      case ModelKind::LinearSVM: {
        LinearParams p;
        p.weights = j.at("weights").get<std::vector<double>>();
        p.bias = j.at("bias").get<double>();
        if (p.weights.size() != m.dim) throw ParseError("model file: weight shape does not match dim");
        m.params = std::move(p);
        break;
      }
      case ModelKind::KNN: {
        KnnParams p;
        p.k = j.at("k").get<std::size_t>();
        p.train.dim = m.dim;
        for (const auto& r : j.at("train")) p.train.features.push_back(detail::sparse_from_json(r, m.dim));
        p.train.labels = j.at("labels").get<std::vector<bool>>();
        p.train.validate();
        m.params = std::move(p);
        break;
      }
      case ModelKind::RandomForest: {
        ForestParams p;
        for (const auto& t : j.at("trees")) {
          DecisionTree tree;
          for (const auto& n : t) {
            TreeNode node;
            node.feature = n.at(0).get<std::int64_t>();
            node.threshold = n.at(1).get<double>();
            node.left = n.at(2).get<std::int64_t>();
            node.right = n.at(3).get<std::int64_t>();
            node.counts = {n.at(4).get<std::uint64_t>(), n.at(5).get<std::uint64_t>()};
            tree.nodes.push_back(node);
          }
          p.trees.push_back(std::move(tree));
        }
        m.params = std::move(p);
        break;
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("model file: ") + e.what());
  }
}

inline void save_model(const std::filesystem::path& path, const TrainedModel& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << model_to_json(m).dump() << '\n';
  if (!out) throw IoError(path.string() + ": write failed");
}

inline TrainedModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": not found");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace hatelab
