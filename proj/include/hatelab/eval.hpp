#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "hatelab/classifiers.hpp"
#include "hatelab/corpus.hpp"
#include "hatelab/error.hpp"
#include "hatelab/features.hpp"

namespace hatelab {

// "true" is the positive (anti-Semitic) class.
struct ConfusionMatrix {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(const std::vector<bool>& predictions, const std::vector<bool>& truth) {
  if (predictions.size() != truth.size()) {
    throw DomainError("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                      std::to_string(truth.size()) + " labels");
  }
  if (truth.empty()) throw DomainError("confusion: no examples");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predictions[i]) {
      ++(truth[i] ? cm.tp : cm.fp);
    } else {
      ++(truth[i] ? cm.fn : cm.tn);
    }
  }
  return cm;
}

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

// Undefined ratios (0/0) are reported as 0.
inline Metrics metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DomainError("metrics: empty confusion matrix");
  const auto d = [](std::uint64_t x) { return static_cast<double>(x); };
  Metrics m;
  m.accuracy = d(cm.tp + cm.tn) / d(cm.total());
  m.precision = (cm.tp + cm.fp) == 0 ? 0.0 : d(cm.tp) / d(cm.tp + cm.fp);
  m.recall = (cm.tp + cm.fn) == 0 ? 0.0 : d(cm.tp) / d(cm.tp + cm.fn);
  // 2PR/(P+R) reduces to 2tp/(2tp+fp+fn), which avoids compounding rounding.
  m.f1 = cm.tp == 0 ? 0.0 : d(2 * cm.tp) / d(2 * cm.tp + cm.fp + cm.fn);
  return m;
}

enum class EmbeddingKind { Count, Tfidf, Hashing, Word2Vec, GloVe };

inline std::string_view short_name(EmbeddingKind k) {
  switch (k) {
    case EmbeddingKind::Count: return "count";
    case EmbeddingKind::Tfidf: return "tfidf";
    case EmbeddingKind::Hashing: return "hashing";
    case EmbeddingKind::Word2Vec: return "word2vec";
    case EmbeddingKind::GloVe: return "glove";
  }
  return "?";
}

inline std::string_view display_name(EmbeddingKind k) {
  switch (k) {
    case EmbeddingKind::Count: return "CountVectorizer";
    case EmbeddingKind::Tfidf: return "TfidfVectorizer";
    case EmbeddingKind::Hashing: return "HashingVectorizer";
    case EmbeddingKind::Word2Vec: return "Word2Vec";
    case EmbeddingKind::GloVe: return "GloVe";
  }
  return "?";
}

inline std::string_view short_name(ModelKind k) {
  switch (k) {
    case ModelKind::LogisticRegression: return "logreg";
    case ModelKind::KNN: return "knn";
    case ModelKind::LinearSVM: return "svm";
    case ModelKind::RandomForest: return "rf";
    case ModelKind::NaiveBayes: return "nb";
  }
  return "?";
}

inline std::string_view display_name(ModelKind k) {
  switch (k) {
    case ModelKind::LogisticRegression: return "Logistic Regression";
    case ModelKind::KNN: return "k-NN";
    case ModelKind::LinearSVM: return "SVM";
    case ModelKind::RandomForest: return "Random Forests";
    case ModelKind::NaiveBayes: return "Naive Bayes";
  }
  return "?";
}

inline constexpr ModelKind kAllModels[] = {ModelKind::LogisticRegression, ModelKind::KNN, ModelKind::LinearSVM,
                                           ModelKind::RandomForest, ModelKind::NaiveBayes};
inline constexpr EmbeddingKind kAllEmbeddings[] = {EmbeddingKind::Count, EmbeddingKind::Tfidf,
                                                   EmbeddingKind::Hashing, EmbeddingKind::Word2Vec,
                                                   EmbeddingKind::GloVe};

inline std::optional<ModelKind> parse_model_name(std::string_view s) {
  for (const auto k : kAllModels) {
    if (s == short_name(k) || s == display_name(k) || s == to_string(k)) return k;
  }
  return std::nullopt;
}

inline std::optional<EmbeddingKind> parse_embedding_name(std::string_view s) {
  for (const auto k : kAllEmbeddings) {
    if (s == short_name(k) || s == display_name(k)) return k;
  }
  return std::nullopt;
}

struct ModelSpec {
  ModelKind kind = ModelKind::LogisticRegression;
  NaiveBayesOptions nb{};
  LogRegOptions logreg{};
  SvmOptions svm{};
  std::size_t knn_k = 5;
  ForestOptions forest{};
};

struct EmbeddingSpec {
  EmbeddingKind kind = EmbeddingKind::Tfidf;
  std::size_t hash_dim = kDefaultHashDim;
  std::shared_ptr<const EmbeddingTable> table;  // Word2Vec / GloVe only
};

struct GridCell {
  ModelSpec model;
  EmbeddingSpec embedding;
};

struct SplitParams {
  double test_fraction = 0.2;
  std::uint64_t seed = 42;
};

struct ReportRow {
  std::string model;      // display name
  std::string embedding;  // display name
  std::optional<Metrics> metrics;
  ConfusionMatrix cm;
  std::string skip_reason;  // non-empty iff metrics is absent
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::uint64_t split_seed = 42;
  std::string corpus_id;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

// Stable fingerprint of ids, texts and labels.
inline std::string corpus_fingerprint(const LabeledCorpus& c) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto mix = [&](std::string_view s) {
    for (const char ch : s) {
      h ^= static_cast<std::uint8_t>(ch);
      h *= 1099511628211ULL;
    }
    h ^= 0xFF;
    h *= 1099511628211ULL;
  };
  for (std::size_t i = 0; i < c.size(); ++i) {
    mix(c.posts[i].id);
    mix(c.posts[i].text);
    mix(c.labels[i] ? "1" : "0");
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Hooks for inspecting what run_grid fitted.
struct GridObserver {
  std::function<void(EmbeddingKind, const Vocabulary&)> on_vocabulary;
};

namespace detail {

struct FeatureSplit {
  Dataset train;
  std::vector<SparseVector> test;
};

inline std::vector<TokenList> tokens_of(const LabeledCorpus& c) {
  std::vector<TokenList> out;
  out.reserve(c.size());
  for (const auto& p : c.posts) out.push_back(p.tokens);
  return out;
}

inline FeatureSplit build_features(const EmbeddingSpec& spec, const LabeledCorpus& train, const LabeledCorpus& test,
                                   const GridObserver* observer) {
  const auto train_docs = tokens_of(train);
  const auto test_docs = tokens_of(test);
  std::vector<SparseVector> tr, te;
  tr.reserve(train_docs.size());
  te.reserve(test_docs.size());
  switch (spec.kind) {
    case EmbeddingKind::Count:
    case EmbeddingKind::Tfidf: {
      const auto vocab = fit_count(train_docs);
      if (observer && observer->on_vocabulary) observer->on_vocabulary(spec.kind, vocab);
      const auto f = [&](const TokenList& d) {
        return spec.kind == EmbeddingKind::Count ? transform_count(vocab, d) : transform_tfidf(vocab, d);
      };
      for (const auto& d : train_docs) tr.push_back(f(d));
      for (const auto& d : test_docs) te.push_back(f(d));
      break;
    }
    case EmbeddingKind::Hashing:
      for (const auto& d : train_docs) tr.push_back(transform_hashing(d, spec.hash_dim));
      for (const auto& d : test_docs) te.push_back(transform_hashing(d, spec.hash_dim));
      break;
    case EmbeddingKind::Word2Vec:
    case EmbeddingKind::GloVe:
      if (!spec.table) {
        throw DomainError(std::string("embedding '") + std::string(short_name(spec.kind)) +
                          "' needs a pretrained vector file");
      }
      for (const auto& d : train_docs) tr.push_back(to_sparse(embed_mean(*spec.table, d)));
      for (const auto& d : test_docs) te.push_back(to_sparse(embed_mean(*spec.table, d)));
      break;
  }
  return {Dataset::from_sparse(std::move(tr), train.labels), std::move(te)};
}

inline TrainedModel fit_model(const ModelSpec& spec, const Dataset& data) {
  switch (spec.kind) {
    case ModelKind::NaiveBayes: return nb_fit(data, spec.nb.alpha);
    case ModelKind::LogisticRegression: return logreg_fit(data, spec.logreg);
    case ModelKind::LinearSVM: return svm_fit(data, spec.svm);
    case ModelKind::KNN: return knn_fit(data, spec.knn_k);
    case ModelKind::RandomForest: return rf_fit(data, spec.forest);
  }
  throw DomainError("unknown model kind");
}

}  // namespace detail

// One shared stratified split; each cell fits on train and scores on test.
// Naive Bayes cells whose features contain negative values are skipped.
inline EvalReport run_grid(const LabeledCorpus& corpus, const std::vector<GridCell>& grid,
                           const SplitParams& split = {}, const GridObserver* observer = nullptr) {
  if (grid.empty()) throw DomainError("run_grid: empty grid");
  const auto pos = corpus.count_positive();
  if (pos == 0 || pos == corpus.size()) throw DomainError("run_grid: corpus must contain both classes");
  const auto [train, test] = split_stratified(corpus, split.test_fraction, split.seed);

  EvalReport report;
  report.split_seed = split.seed;
  report.corpus_id = corpus_fingerprint(corpus);
  report.n_train = train.size();
  report.n_test = test.size();

  for (const auto& cell : grid) {
    ReportRow row;
    row.model = display_name(cell.model.kind);
    row.embedding = display_name(cell.embedding.kind);
    const auto feats = detail::build_features(cell.embedding, train, test, observer);
    if (cell.model.kind == ModelKind::NaiveBayes && feats.train.has_negative_values()) {
      row.skip_reason = "negative features";
      report.rows.push_back(std::move(row));
      continue;
    }
    const auto model = detail::fit_model(cell.model, feats.train);
    row.cm = confusion(predict_batch(model, feats.test), test.labels);
    row.metrics = metrics(row.cm);
    report.rows.push_back(std::move(row));
  }
  return report;
}

enum class ReportFormat { Csv, Markdown };

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

// Rows appear in grid order. In markdown the model name is printed on the
// first row of each consecutive group, and skipped cells are listed under the
// table instead of as rows.
inline std::string emit_report(const EvalReport& report, ReportFormat format) {
  std::ostringstream out;
  if (format == ReportFormat::Csv) {
    out << "model,accuracy,precision,recall,f1,embedding,reason\n";
    for (const auto& r : report.rows) {
      out << detail::csv_field(r.model) << ',';
      if (r.metrics) {
        out << format_metric(r.metrics->accuracy) << ',' << format_metric(r.metrics->precision) << ','
            << format_metric(r.metrics->recall) << ',' << format_metric(r.metrics->f1) << ',';
      } else {
        out << ",,,,";
      }
      out << detail::csv_field(r.embedding) << ',' << detail::csv_field(r.skip_reason) << '\n';
    }
    return out.str();
  }

  out << "| Model | Accuracy | Precision | Recall | F1-score | Embedding |\n";
  out << "|---|---|---|---|---|---|\n";
  std::string previous;
  std::vector<const ReportRow*> skipped;
  for (const auto& r : report.rows) {
    if (!r.metrics) {
      skipped.push_back(&r);
      continue;
    }
    out << "| " << (r.model == previous ? std::string() : r.model) << " | " << format_metric(r.metrics->accuracy)
        << " | " << format_metric(r.metrics->precision) << " | " << format_metric(r.metrics->recall) << " | "
        << format_metric(r.metrics->f1) << " | " << r.embedding << " |\n";
    previous = r.model;
  }
  if (!skipped.empty()) {
    out << "\nSkipped:\n";
    for (const auto* r : skipped) out << "- " << r->model << " x " << r->embedding << ": " << r->skip_reason << '\n';
  }
  return out.str();
}

// Grid file: one "model,embedding" pair per line; '#' starts a comment.
struct GridEntry {
  ModelKind model;
  EmbeddingKind embedding;
};

inline std::string valid_model_names() {
  std::string s;
  for (const auto k : kAllModels) s += (s.empty() ? "" : ", ") + std::string(short_name(k));
  return s;
}

inline std::string valid_embedding_names() {
  std::string s;
  for (const auto k : kAllEmbeddings) s += (s.empty() ? "" : ", ") + std::string(short_name(k));
  return s;
}

inline std::vector<GridEntry> parse_grid(std::istream& in) {
  std::vector<GridEntry> out;
  std::string line;
  std::size_t line_no = 0;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw DomainError("grid line " + std::to_string(line_no) + ": expected 'model,embedding'");
    }
    const auto m = trim(line.substr(0, comma));
    const auto e = trim(line.substr(comma + 1));
    const auto mk = parse_model_name(m);
    if (!mk) {
      throw DomainError("grid line " + std::to_string(line_no) + ": unknown model '" + m +
                        "' (valid: " + valid_model_names() + ")");
    }
    const auto ek = parse_embedding_name(e);
    if (!ek) {
      throw DomainError("grid line " + std::to_string(line_no) + ": unknown embedding '" + e +
                        "' (valid: " + valid_embedding_names() + ")");
    }
    out.push_back({*mk, *ek});
  }
  return out;
}

}  // namespace hatelab
