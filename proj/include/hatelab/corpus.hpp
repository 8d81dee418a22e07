#pragma once

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"

#include "hatelab/error.hpp"
#include "hatelab/random.hpp"

namespace hatelab {

inline constexpr std::string_view kUrlToken = "<url>";
inline constexpr std::string_view kUserToken = "<user>";

struct Post {
  std::string id;
  std::string text;
  std::vector<std::string> tokens;
  std::map<std::string, std::string> meta;

  friend bool operator==(const Post&, const Post&) = default;
};

struct LabeledCorpus {
  std::vector<Post> posts;
  std::vector<bool> labels;  // true = anti-Semitic
  std::uint64_t split_seed = 42;

  std::size_t size() const { return posts.size(); }
  std::size_t count_positive() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  }

  friend bool operator==(const LabeledCorpus&, const LabeledCorpus&) = default;
};

namespace detail {

inline void append_utf8(std::string& out, UChar32 c) {
  char buf[U8_MAX_LENGTH];
  std::int32_t len = 0;
  UBool err = false;
  U8_APPEND(buf, len, U8_MAX_LENGTH, c, err);
  if (!err) out.append(buf, static_cast<std::size_t>(len));
}

// Decode to lowercase code points. Invalid bytes become U+FFFD, which is not
// alphanumeric and so acts as a separator.
inline std::vector<UChar32> lowercase_code_points(std::string_view text) {
  std::vector<UChar32> cps;
  cps.reserve(text.size());
  const auto* s = reinterpret_cast<const std::uint8_t*>(text.data());
  const auto length = static_cast<std::int32_t>(text.size());
  std::int32_t i = 0;
  while (i < length) {
    UChar32 c;
    U8_NEXT(s, i, length, c);
    cps.push_back(c < 0 ? 0xFFFD : u_tolower(c));
  }
  return cps;
}

inline bool is_word_char(UChar32 c) { return u_isalnum(c); }

inline bool is_ascii_alpha(UChar32 c) { return c >= 'a' && c <= 'z'; }

inline bool is_scheme_char(UChar32 c) {
  return is_ascii_alpha(c) || (c >= '0' && c <= '9') || c == '+' || c == '.' || c == '-';
}

inline bool matches_literal(const std::vector<UChar32>& cps, std::size_t at, std::string_view lit) {
  if (at + lit.size() > cps.size()) return false;
  for (std::size_t k = 0; k < lit.size(); ++k) {
    if (cps[at + k] != static_cast<UChar32>(static_cast<unsigned char>(lit[k]))) return false;
  }
  return true;
}

// Length of a "scheme://" prefix starting at `at`, or 0.
inline std::size_t url_prefix_length(const std::vector<UChar32>& cps, std::size_t at) {
  if (at >= cps.size() || !is_ascii_alpha(cps[at])) return 0;
  std::size_t j = at + 1;
  while (j < cps.size() && is_scheme_char(cps[j])) ++j;
  return matches_literal(cps, j, "://") ? (j + 3 - at) : 0;
}

}  // namespace detail

// Lowercase, replace URLs and @-mentions with sentinels, drop '#', then split
// on runs of non-alphanumeric code points. The sentinels are recognised on
// input so the function is idempotent over its own space-joined output.
inline std::vector<std::string> normalize(std::string_view text) {
  const auto cps = detail::lowercase_code_points(text);
  std::vector<std::string> tokens;
  std::size_t i = 0;
  const std::size_t n = cps.size();
  while (i < n) {
    if (detail::matches_literal(cps, i, kUrlToken)) {
      tokens.emplace_back(kUrlToken);
      i += kUrlToken.size();
      continue;
    }
    if (detail::matches_literal(cps, i, kUserToken)) {
      tokens.emplace_back(kUserToken);
      i += kUserToken.size();
      continue;
    }
    const UChar32 c = cps[i];
    if (c == '@' && i + 1 < n && (detail::is_word_char(cps[i + 1]) || cps[i + 1] == '_')) {
      i += 1;
      while (i < n && (detail::is_word_char(cps[i]) || cps[i] == '_')) ++i;
      tokens.emplace_back(kUserToken);
      continue;
    }
    if (!detail::is_word_char(c)) {
      ++i;
      continue;
    }
    if (const auto url_len = detail::url_prefix_length(cps, i); url_len > 0) {
      i += url_len;
      while (i < n && !u_isUWhiteSpace(cps[i])) ++i;
      tokens.emplace_back(kUrlToken);
      continue;
    }
    std::string token;
    while (i < n && detail::is_word_char(cps[i])) {
      detail::append_utf8(token, cps[i]);
      ++i;
    }
    tokens.push_back(std::move(token));
  }
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (k) out.push_back(' ');
    out += tokens[k];
  }
  return out;
}

inline Post make_post(std::string id, std::string text, std::map<std::string, std::string> meta = {}) {
  Post p{std::move(id), std::move(text), {}, std::move(meta)};
  p.tokens = normalize(p.text);
  return p;
}

// One parsed line of a corpus file.
struct CorpusRecord {
  Post post;
  std::optional<bool> label;
};

namespace detail {

inline CorpusRecord parse_corpus_line(const std::string& line, std::size_t line_no) {
  const auto fail = [&](const std::string& why) {
    return ParseError("line " + std::to_string(line_no) + ": malformed record: " + why);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw fail(e.what());
  }
  if (!j.is_object()) throw fail("expected an object");
  if (!j.contains("id") || !j["id"].is_string()) throw fail("missing string field 'id'");
  if (!j.contains("text") || !j["text"].is_string()) throw fail("missing string field 'text'");
  CorpusRecord rec;
  rec.post.id = j["id"].get<std::string>();
  if (rec.post.id.empty()) throw fail("empty id");
  rec.post.text = j["text"].get<std::string>();
  if (auto it = j.find("meta"); it != j.end() && !it->is_null()) {
    if (!it->is_object()) throw fail("'meta' must be an object");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_string()) throw fail("meta value for '" + k + "' must be a string");
      rec.post.meta.emplace(k, v.get<std::string>());
    }
  }
  if (auto it = j.find("label"); it != j.end() && !it->is_null()) {
    if (it->is_boolean()) {
      rec.label = it->get<bool>();
    } else if (it->is_number_integer() && (it->get<long long>() == 0 || it->get<long long>() == 1)) {
      rec.label = it->get<long long>() == 1;
    } else {
      throw fail("'label' must be 0 or 1");
    }
  }
  rec.post.tokens = normalize(rec.post.text);
  return rec;
}

}  // namespace detail

// Parse line-delimited records. Blank lines are skipped; line numbers in
// errors are 1-based physical lines.
inline std::vector<CorpusRecord> read_corpus_records(std::istream& in) {
  std::vector<CorpusRecord> out;
  std::map<std::string, std::size_t, std::less<>> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto rec = detail::parse_corpus_line(line, line_no);
    if (!seen.emplace(rec.post.id, line_no).second) {
      throw ParseError("duplicate id: " + rec.post.id + " (line " + std::to_string(line_no) + ")");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::vector<CorpusRecord> read_corpus_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": not found");
  return read_corpus_records(in);
}

inline std::vector<Post> load_jsonl(const std::filesystem::path& path) {
  auto recs = read_corpus_records(path);
  std::vector<Post> posts;
  posts.reserve(recs.size());
  for (auto& r : recs) posts.push_back(std::move(r.post));
  return posts;
}

// Every record must carry a label.
inline LabeledCorpus load_labeled_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": not found");
  LabeledCorpus corpus;
  std::size_t idx = 0;
  for (auto& r : read_corpus_records(in)) {
    ++idx;
    if (!r.label) throw ParseError("record " + std::to_string(idx) + " (id " + r.post.id + "): missing label");
    corpus.labels.push_back(*r.label);
    corpus.posts.push_back(std::move(r.post));
  }
  return corpus;
}

inline std::string to_jsonl_line(const Post& post, std::optional<bool> label = std::nullopt) {
  nlohmann::ordered_json j;
  j["id"] = post.id;
  j["text"] = post.text;
  j["tokens"] = post.tokens;
  if (label) j["label"] = *label ? 1 : 0;
  if (!post.meta.empty()) j["meta"] = post.meta;
  return j.dump();
}

inline void write_jsonl(std::ostream& out, const std::vector<Post>& posts,
                        const std::vector<bool>* labels = nullptr) {
  for (std::size_t i = 0; i < posts.size(); ++i) {
    out << to_jsonl_line(posts[i], labels ? std::optional<bool>((*labels)[i]) : std::nullopt) << '\n';
  }
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<Post>& posts,
                        const std::vector<bool>* labels = nullptr) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  write_jsonl(out, posts, labels);
  if (!out) throw IoError(path.string() + ": write failed");
}

inline void write_jsonl(const std::filesystem::path& path, const LabeledCorpus& corpus) {
  write_jsonl(path, corpus.posts, &corpus.labels);
}

// Per-class test count is round(class_count * test_fraction). Within each
// half the original corpus order is kept.
inline std::pair<LabeledCorpus, LabeledCorpus> split_stratified(const LabeledCorpus& corpus,
                                                                 double test_fraction = 0.2,
                                                                 std::uint64_t seed = 42) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw DomainError("test_fraction must lie in (0,1), got " + std::to_string(test_fraction));
  }
  if (corpus.labels.size() != corpus.posts.size()) throw DomainError("labels/posts length mismatch");

  std::vector<bool> in_test(corpus.size(), false);
  for (const bool cls : {false, true}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (corpus.labels[i] == cls) members.push_back(i);
    }
    Rng rng(derive_seed(seed, cls ? 1 : 0));
    rng.shuffle(std::span<std::size_t>(members));
    const auto n_test = static_cast<std::size_t>(std::round(static_cast<double>(members.size()) * test_fraction));
    for (std::size_t k = 0; k < n_test && k < members.size(); ++k) in_test[members[k]] = true;
  }

  LabeledCorpus train, test;
  train.split_seed = test.split_seed = seed;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    auto& dst = in_test[i] ? test : train;
    dst.posts.push_back(corpus.posts[i]);
    dst.labels.push_back(corpus.labels[i]);
  }
  return {std::move(train), std::move(test)};
}

}  // namespace hatelab
