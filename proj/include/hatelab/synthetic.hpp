#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hatelab/corpus.hpp"
#include "hatelab/features.hpp"
#include "hatelab/random.hpp"

// Generated fixtures. The hostile class is built from templates aimed at a
// placeholder target ("groupx") so the bundled data carries the structure of
// the task without reproducing real slurs.
namespace hatelab::synthetic {

namespace detail {

template <std::size_t N>
std::string_view pick(Rng& rng, const std::array<std::string_view, N>& xs) {
  return xs[static_cast<std::size_t>(rng.below(N))];
}

inline constexpr std::array<std::string_view, 6> kTarget = {"groupx", "the groupx", "groupx people",
                                                            "groupx families", "those groupx", "groupx folks"};
inline constexpr std::array<std::string_view, 10> kHostileVerb = {"hate",  "despise", "blame",   "loathe",
                                                                  "resent", "expel",  "exclude", "ban",
                                                                  "shun",   "curse"};
inline constexpr std::array<std::string_view, 8> kHostileNoun = {"enemies",  "liars",     "schemers", "traitors",
                                                                 "plotters", "invaders", "leeches",  "cheats"};
inline constexpr std::array<std::string_view, 8> kHostileTail = {
    "they should all leave", "never trust them", "they ruin everything", "get them out",
    "they secretly run it all", "no place for them here", "they are behind it", "keep them away"};
inline constexpr std::array<std::string_view, 10> kNeutralVerb = {"visited", "celebrated", "met",    "joined",
                                                                  "welcomed", "thanked",  "hosted", "supported",
                                                                  "read about", "talked with"};
inline constexpr std::array<std::string_view, 10> kNeutralTopic = {
    "the holiday dinner",     "a community festival", "the new museum exhibit", "the local library",
    "a charity bake sale",    "the history lecture",  "a neighborhood cleanup", "the interfaith meeting",
    "the school fundraiser",  "a music night"};
inline constexpr std::array<std::string_view, 12> kFiller = {
    "great game last night",      "coffee first then work",     "traffic is terrible today",
    "just finished a long run",   "new phone who dis",          "weekend plans anyone",
    "the weather turned cold",    "watching the match tonight", "reading a good book",
    "cooked pasta for everyone",  "train delayed again",        "finally fixed my bike"};
inline constexpr std::array<std::string_view, 6> kCounter = {
    "we must stand against people who", "it is shameful that some",  "reporting accounts that",
    "nobody should ever",               "i am tired of trolls who", "the article documents how extremists"};

inline std::string decorate(Rng& rng, std::string text) {
  const double r = rng.uniform();
  if (r < 0.15) text = "@user" + std::to_string(rng.below(500)) + " " + text;
  if (rng.uniform() < 0.10) text += " https://t.example/" + std::to_string(rng.below(100000));
  if (rng.uniform() < 0.10) text += " #news";
  if (rng.uniform() < 0.20) text[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(text[0])));
  if (rng.uniform() < 0.30) text += "!";
  return text;
}

inline std::string hostile_post(Rng& rng) {
  std::string s;
  switch (rng.below(4)) {
    case 0:
      s = "i " + std::string(pick(rng, kHostileVerb)) + " " + std::string(pick(rng, kTarget)) + " " +
          std::string(pick(rng, kHostileTail));
      break;
    case 1:
      s = std::string(pick(rng, kTarget)) + " are " + std::string(pick(rng, kHostileNoun)) + " " +
          std::string(pick(rng, kHostileTail));
      break;
    case 2:
      s = "all " + std::string(pick(rng, kTarget)) + " are " + std::string(pick(rng, kHostileNoun)) + " and we " +
          std::string(pick(rng, kHostileVerb)) + " them";
      break;
    default:
      s = std::string(pick(rng, kFiller)) + " but " + std::string(pick(rng, kTarget)) + " " +
          std::string(pick(rng, kHostileTail));
      break;
  }
  return s;
}

inline std::string benign_post(Rng& rng) {
  std::string s;
  switch (rng.below(4)) {
    case 0:
      s = "we " + std::string(pick(rng, kNeutralVerb)) + " " + std::string(pick(rng, kTarget)) + " at " +
          std::string(pick(rng, kNeutralTopic));
      break;
    case 1:
      s = std::string(pick(rng, kFiller)) + " and then " + std::string(pick(rng, kNeutralTopic));
      break;
    case 2:
      // Counter-speech: hostile vocabulary in a condemning frame.
      s = std::string(pick(rng, kCounter)) + " " + std::string(pick(rng, kHostileVerb)) + " " +
          std::string(pick(rng, kTarget));
      break;
    default:
      s = std::string(pick(rng, kFiller));
      break;
  }
  return s;
}

}  // namespace detail

struct CorpusOptions {
  std::size_t n_docs = 2000;
  double positive_rate = 0.2;
  double label_noise = 0.02;  // fraction of labels flipped after generation
  std::uint64_t seed = 42;
};

inline LabeledCorpus generate_corpus(const CorpusOptions& opt = {}) {
  Rng rng(opt.seed);
  LabeledCorpus c;
  c.split_seed = opt.seed;
  const auto n_pos = static_cast<std::size_t>(static_cast<double>(opt.n_docs) * opt.positive_rate + 0.5);
  std::vector<bool> labels(opt.n_docs, false);
  for (std::size_t i = 0; i < n_pos; ++i) labels[i] = true;
  std::vector<std::size_t> order(opt.n_docs);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t k = 0; k < opt.n_docs; ++k) {
    const bool hostile = labels[order[k]];
    auto text = detail::decorate(rng, hostile ? detail::hostile_post(rng) : detail::benign_post(rng));
    bool label = hostile;
    if (rng.uniform() < opt.label_noise) label = !label;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%05zu", k);
    c.posts.push_back(make_post(id, std::move(text), {{"source", "synthetic"}}));
    c.labels.push_back(label);
  }
  return c;
}

// Distinct tokens of a corpus in first-seen order.
inline std::vector<std::string> corpus_terms(const LabeledCorpus& c) {
  std::vector<std::string> terms;
  std::set<std::string, std::less<>> seen;
  for (const auto& p : c.posts) {
    for (const auto& t : p.tokens) {
      if (seen.insert(t).second) terms.push_back(t);
    }
  }
  return terms;
}

enum class EmbeddingFlavor { Word2Vec, GloVe };

// Small pretrained-style vectors: Gaussian noise plus a shared direction for
// hostile vocabulary. Entries are signed, as in real embedding files.
inline EmbeddingTable make_embeddings(const std::vector<std::string>& terms, std::size_t dim,
                                      EmbeddingFlavor flavor, std::uint64_t seed) {
  std::set<std::string, std::less<>> hostile;
  for (const auto list : {std::span<const std::string_view>(detail::kHostileVerb),
                          std::span<const std::string_view>(detail::kHostileNoun)}) {
    for (const auto w : list) hostile.emplace(w);
  }
  Rng rng(derive_seed(seed, flavor == EmbeddingFlavor::Word2Vec ? 11 : 12));
  const double noise = flavor == EmbeddingFlavor::Word2Vec ? 0.6 : 0.4;
  EmbeddingTable table(dim);
  for (const auto& t : terms) {
    DenseVector v{std::vector<double>(dim)};
    for (auto& x : v.values) x = rng.normal(0.0, noise);
    if (hostile.count(t)) v.values[0] += 1.0;
    table.insert(t, std::move(v));
  }
  return table;
}

inline void write_embeddings(std::ostream& out, const std::vector<std::string>& terms, const EmbeddingTable& table) {
  for (const auto& t : terms) {
    const auto* v = table.find(t);
    if (!v) continue;
    out << t;
    char buf[32];
    for (const double x : v->values) {
      std::snprintf(buf, sizeof buf, " %.6f", x);
      out << buf;
    }
    out << '\n';
  }
}

// Token-id sequences for the transformer: a positive sequence contains at
// least one marker id (1..n_markers); negatives never do. Id 0 is reserved.
struct SequenceExample {
  std::vector<std::size_t> ids;
  bool label = false;
};

struct SequenceOptions {
  std::size_t n_examples = 64;
  std::size_t vocab_size = 32;
  std::size_t n_markers = 2;
  std::size_t min_len = 4;
  std::size_t max_len = 12;
  std::uint64_t seed = 7;
};

inline std::vector<SequenceExample> make_sequence_fixture(const SequenceOptions& opt = {}) {
  Rng rng(opt.seed);
  std::vector<SequenceExample> out;
  const std::size_t first_plain = opt.n_markers + 1;
  for (std::size_t i = 0; i < opt.n_examples; ++i) {
    SequenceExample ex;
    ex.label = (i % 2) == 1;
    const auto len = opt.min_len + static_cast<std::size_t>(rng.below(opt.max_len - opt.min_len + 1));
    for (std::size_t t = 0; t < len; ++t) {
      ex.ids.push_back(first_plain + static_cast<std::size_t>(rng.below(opt.vocab_size - first_plain)));
    }
    if (ex.label) {
      const auto where = static_cast<std::size_t>(rng.below(len));
      ex.ids[where] = 1 + static_cast<std::size_t>(rng.below(opt.n_markers));
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace hatelab::synthetic
