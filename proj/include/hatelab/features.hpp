#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "hatelab/error.hpp"

namespace hatelab {

using TokenList = std::vector<std::string>;

struct SparseEntry {
  std::size_t index = 0;
  double value = 0.0;

  friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

// Sorted (index, value) pairs; no explicit zeros.
struct SparseVector {
  std::size_t dim = 0;
  std::vector<SparseEntry> entries;

  std::size_t nnz() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  // Value at `index` by binary search; 0 when absent.
  double at(std::size_t index) const {
    const auto it = std::lower_bound(entries.begin(), entries.end(), index,
                                     [](const SparseEntry& e, std::size_t i) { return e.index < i; });
    return (it != entries.end() && it->index == index) ? it->value : 0.0;
  }

  bool valid() const {
    for (std::size_t k = 0; k < entries.size(); ++k) {
      if (entries[k].index >= dim || entries[k].value == 0.0 || !std::isfinite(entries[k].value)) return false;
      if (k > 0 && entries[k - 1].index >= entries[k].index) return false;
    }
    return true;
  }

  friend bool operator==(const SparseVector&, const SparseVector&) = default;
};

struct DenseVector {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
  friend bool operator==(const DenseVector&, const DenseVector&) = default;
};

inline SparseVector to_sparse(const DenseVector& v) {
  SparseVector s;
  s.dim = v.dim();
  for (std::size_t i = 0; i < v.values.size(); ++i) {
    if (v.values[i] != 0.0) s.entries.push_back({i, v.values[i]});
  }
  return s;
}

inline double dot(const SparseVector& x, const std::vector<double>& w) {
  double acc = 0.0;
  for (const auto& e : x.entries) acc += e.value * w[e.index];
  return acc;
}

inline double squared_norm(const SparseVector& x) {
  double acc = 0.0;
  for (const auto& e : x.entries) acc += e.value * e.value;
  return acc;
}

// Sum of (a_i - b_i)^2 over the union of stored indices.
inline double squared_distance(const SparseVector& a, const SparseVector& b) {
  double acc = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.entries.size() || j < b.entries.size()) {
    if (j == b.entries.size() || (i < a.entries.size() && a.entries[i].index < b.entries[j].index)) {
      acc += a.entries[i].value * a.entries[i].value;
      ++i;
    } else if (i == a.entries.size() || b.entries[j].index < a.entries[i].index) {
      acc += b.entries[j].value * b.entries[j].value;
      ++j;
    } else {
      const double d = a.entries[i].value - b.entries[j].value;
      acc += d * d;
      ++i;
      ++j;
    }
  }
  return acc;
}

namespace detail {

// Turns an index->value accumulation into a canonical SparseVector.
inline SparseVector from_accumulator(std::size_t dim, std::unordered_map<std::size_t, double>& acc) {
  SparseVector v;
  v.dim = dim;
  v.entries.reserve(acc.size());
  for (const auto& [idx, val] : acc) {
    if (val != 0.0) v.entries.push_back({idx, val});
  }
  std::sort(v.entries.begin(), v.entries.end(),
            [](const SparseEntry& a, const SparseEntry& b) { return a.index < b.index; });
  return v;
}

}  // namespace detail

// Term -> dense index, plus document frequencies over the fitting corpus.
class Vocabulary {
 public:
  std::size_t size() const { return terms_.size(); }
  std::size_t n_docs() const { return n_docs_; }
  const std::vector<std::string>& terms() const { return terms_; }
  const std::vector<std::size_t>& doc_freq() const { return doc_freq_; }

  std::optional<std::size_t> index_of(std::string_view term) const {
    const auto it = index_.find(std::string(term));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool contains(std::string_view term) const { return index_of(term).has_value(); }

  std::size_t df(std::string_view term) const {
    const auto i = index_of(term);
    return i ? doc_freq_[*i] : 0;
  }

  // Smoothed idf: ln((1+N)/(1+df)) + 1.
  double idf_at(std::size_t index) const {
    return std::log((1.0 + static_cast<double>(n_docs_)) / (1.0 + static_cast<double>(doc_freq_[index]))) + 1.0;
  }

  friend Vocabulary fit_count(const std::vector<TokenList>& docs);
  friend Vocabulary read_vocabulary(std::istream& in);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.terms_ == b.terms_ && a.doc_freq_ == b.doc_freq_ && a.n_docs_ == b.n_docs_;
  }

 private:
  std::size_t add_term(const std::string& t) {
    const auto [it, inserted] = index_.emplace(t, terms_.size());
    if (inserted) {
      terms_.push_back(t);
      doc_freq_.push_back(0);
    }
    return it->second;
  }

  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string> terms_;
  std::vector<std::size_t> doc_freq_;
  std::size_t n_docs_ = 0;
};

// Indices follow first appearance; df counts documents, not occurrences.
inline Vocabulary fit_count(const std::vector<TokenList>& docs) {
  if (docs.empty()) throw DomainError("fit_count: empty corpus");
  Vocabulary v;
  v.n_docs_ = docs.size();
  std::vector<std::size_t> last_doc;  // last document that bumped each term's df
  for (std::size_t d = 0; d < docs.size(); ++d) {
    for (const auto& tok : docs[d]) {
      const auto idx = v.add_term(tok);
      if (idx == last_doc.size()) last_doc.push_back(docs.size());
      if (last_doc[idx] != d) {
        last_doc[idx] = d;
        ++v.doc_freq_[idx];
      }
    }
  }
  return v;
}

// "N <n_docs>" header, then one "term index df" line per term in index order.
inline void write_vocabulary(std::ostream& out, const Vocabulary& v) {
  out << "N " << v.n_docs() << '\n';
  for (std::size_t i = 0; i < v.size(); ++i) out << v.terms()[i] << ' ' << i << ' ' << v.doc_freq()[i] << '\n';
}

inline Vocabulary read_vocabulary(std::istream& in) {
  Vocabulary v;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("vocabulary: missing N header");
  {
    std::istringstream hs(line);
    std::string tag;
    if (!(hs >> tag >> v.n_docs_) || tag != "N") throw ParseError("vocabulary: bad header '" + line + "'");
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string term;
    std::size_t idx = 0, df = 0;
    if (!(ls >> term >> idx >> df) || idx != v.terms_.size() || df < 1 || df > v.n_docs_ || v.contains(term)) {
      throw ParseError("vocabulary: bad entry at line " + std::to_string(line_no));
    }
    v.add_term(term);
    v.doc_freq_[idx] = df;
  }
  return v;
}

inline SparseVector transform_count(const Vocabulary& vocab, const TokenList& doc) {
  std::unordered_map<std::size_t, double> acc;
  for (const auto& tok : doc) {
    if (const auto idx = vocab.index_of(tok)) acc[*idx] += 1.0;
  }
  return detail::from_accumulator(vocab.size(), acc);
}

// tf * idf, then L2-normalised; an all-unknown document stays the zero vector.
inline SparseVector transform_tfidf(const Vocabulary& vocab, const TokenList& doc) {
  if (vocab.n_docs() == 0) throw DomainError("transform_tfidf: vocabulary not fitted");
  auto v = transform_count(vocab, doc);
  for (auto& e : v.entries) e.value *= vocab.idf_at(e.index);
  const double norm = std::sqrt(squared_norm(v));
  if (norm > 0.0) {
    for (auto& e : v.entries) e.value /= norm;
  }
  return v;
}

inline constexpr std::size_t kDefaultHashDim = std::size_t{1} << 18;

inline constexpr std::uint32_t fnv1a32(std::string_view bytes) {
  std::uint32_t h = 2166136261u;
  for (const char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 16777619u;
  }
  return h;
}

inline bool valid_hash_dim(std::size_t dim) {
  for (int k = 8; k <= 24; ++k) {
    if (dim == (std::size_t{1} << k)) return true;
  }
  return false;
}

// Stateless: bucket = FNV-1a-32(utf8 token) mod dim, colliding counts add.
inline SparseVector transform_hashing(const TokenList& doc, std::size_t dim = kDefaultHashDim) {
  if (!valid_hash_dim(dim)) {
    throw DomainError("hashing dim must be 2^k with 8 <= k <= 24, got " + std::to_string(dim));
  }
  std::unordered_map<std::size_t, double> acc;
  for (const auto& tok : doc) acc[fnv1a32(tok) & (dim - 1)] += 1.0;
  return detail::from_accumulator(dim, acc);
}

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return rows_.size(); }

  // First insertion of a word wins.
  void insert(const std::string& word, DenseVector v) {
    if (v.dim() != dim_) throw DomainError("embedding for '" + word + "' has dim " + std::to_string(v.dim()));
    rows_.emplace(word, std::move(v));
  }

  const DenseVector* find(std::string_view word) const {
    const auto it = rows_.find(std::string(word));
    return it == rows_.end() ? nullptr : &it->second;
  }

 private:
  std::size_t dim_ = 0;
  std::unordered_map<std::string, DenseVector> rows_;
};

// GloVe-style text: "word v1 ... vd" per line, d taken from the first row.
inline EmbeddingTable read_embeddings(std::istream& in, const std::string& source = "<stream>") {
  EmbeddingTable table;
  bool have_dim = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    DenseVector v;
    std::string field;
    while (ls >> field) {
      double x = 0.0;
      try {
        std::size_t used = 0;
        x = std::stod(field, &used);
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        throw ParseError(source + ": line " + std::to_string(line_no) + ": bad number '" + field + "'");
      }
      if (!std::isfinite(x)) throw ParseError(source + ": line " + std::to_string(line_no) + ": non-finite value");
      v.values.push_back(x);
    }
    if (!have_dim) {
      if (v.dim() == 0) throw ParseError(source + ": line " + std::to_string(line_no) + ": no vector values");
      table = EmbeddingTable(v.dim());
      have_dim = true;
    } else if (v.dim() != table.dim()) {
      throw ParseError(source + ": line " + std::to_string(line_no) + ": dimension " + std::to_string(v.dim()) +
                       " differs from " + std::to_string(table.dim()));
    }
    table.insert(word, std::move(v));
  }
  if (!have_dim) throw ParseError(source + ": no vectors");
  return table;
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": not found");
  return read_embeddings(in, path.string());
}

// Mean of in-table token vectors; zero vector when nothing is found. Sums run
// over distinct words in sorted order, so any permutation of `doc` gives a
// bit-identical result.
inline DenseVector embed_mean(const EmbeddingTable& table, const TokenList& doc) {
  DenseVector out{std::vector<double>(table.dim(), 0.0)};
  std::map<std::string_view, std::size_t> counts;
  std::size_t found = 0;
  for (const auto& tok : doc) {
    if (table.find(tok)) {
      ++counts[tok];
      ++found;
    }
  }
  for (const auto& [word, n] : counts) {
    const auto& v = table.find(word)->values;
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += static_cast<double>(n) * v[i];
  }
  if (found > 0) {
    for (auto& x : out.values) x /= static_cast<double>(found);
  }
  return out;
}

}  // namespace hatelab
