#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <cmath>
#include <set>
#include <sstream>

#include "hatelab/corpus.hpp"
#include "hatelab/synthetic.hpp"

using namespace hatelab;
namespace fs = std::filesystem;

namespace {

using Tokens = std::vector<std::string>;

fs::path temp_file(const std::string& name, const std::string& content) {
  const auto p = fs::temp_directory_path() / ("hatelab_corpus_" + name);
  std::ofstream(p) << content;
  return p;
}

}  // namespace

TEST(Normalize, LowercasesAndSplitsOnPunctuation) {
  EXPECT_EQ(normalize("Hello, World!"), (Tokens{"hello", "world"}));
  EXPECT_EQ(normalize("  "), Tokens{});
  EXPECT_EQ(normalize(""), Tokens{});
}

TEST(Normalize, MentionsAndUrlsBecomePlaceholders) {
  EXPECT_EQ(normalize("@sam see https://x.co/a?b=1 #Hate"), (Tokens{"<user>", "see", "<url>", "hate"}));
  EXPECT_EQ(normalize("mail@ something"), (Tokens{"mail", "something"}));
  EXPECT_EQ(normalize("@_x hi"), (Tokens{"<user>", "hi"}));
}

TEST(Normalize, UnicodeLetters) {
  EXPECT_EQ(normalize("ÜBER straße"), (Tokens{"über", "straße"}));
}

TEST(Normalize, Idempotent) {
  const auto c = synthetic::generate_corpus({.n_docs = 300});
  for (const auto& p : c.posts) {
    const auto once = normalize(p.text);
    EXPECT_EQ(normalize(join_tokens(once)), once) << p.text;
  }
  EXPECT_EQ(normalize("<url> <user>"), (Tokens{"<url>", "<user>"}));
}

TEST(LoadJsonl, ReadsRecordsAndNormalizes) {
  const auto p = temp_file("ok.jsonl",
                           "{\"id\":\"a\",\"text\":\"Hi There\"}\n\n{\"id\":\"b\",\"text\":\"x\",\"meta\":{\"src\":\"t\"}}\n");
  const auto posts = load_jsonl(p);
  ASSERT_EQ(posts.size(), 2u);
  EXPECT_EQ(posts[0].id, "a");
  EXPECT_EQ(posts[0].tokens, (Tokens{"hi", "there"}));
  EXPECT_EQ(posts[1].meta.at("src"), "t");
}

TEST(LoadJsonl, MalformedLineNamesTheLine) {
  std::string content;
  for (int i = 1; i <= 6; ++i) content += "{\"id\":\"p" + std::to_string(i) + "\",\"text\":\"ok\"}\n";
  content += "{\"id\": 7, oops\n";
  const auto p = temp_file("bad.jsonl", content);
  try {
    load_jsonl(p);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 7"), std::string::npos) << e.what();
  }
}

TEST(LoadJsonl, DuplicateIdAndMissingFile) {
  const auto p = temp_file("dup.jsonl", "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n");
  EXPECT_THROW(load_jsonl(p), ParseError);
  try {
    load_jsonl("/nonexistent/corpus.jsonl");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("not found"), std::string::npos);
  }
}

TEST(LoadJsonl, RejectsNonStringFields) {
  EXPECT_THROW(load_jsonl(temp_file("t1.jsonl", "{\"id\":\"a\"}\n")), ParseError);
  EXPECT_THROW(load_jsonl(temp_file("t2.jsonl", "{\"id\":\"a\",\"text\":3}\n")), ParseError);
  EXPECT_THROW(load_jsonl(temp_file("t3.jsonl", "{\"id\":\"a\",\"text\":\"x\",\"meta\":{\"k\":1}}\n")), ParseError);
  EXPECT_THROW(load_jsonl(temp_file("t4.jsonl", "[1,2]\n")), ParseError);
}

TEST(LoadLabeled, RequiresLabels) {
  const auto ok = temp_file("lab.jsonl", "{\"id\":\"a\",\"text\":\"x\",\"label\":1}\n{\"id\":\"b\",\"text\":\"y\",\"label\":false}\n");
  const auto c = load_labeled_jsonl(ok);
  EXPECT_EQ(c.labels, (std::vector<bool>{true, false}));
  const auto missing = temp_file("nolab.jsonl", "{\"id\":\"a\",\"text\":\"x\"}\n");
  EXPECT_THROW(load_labeled_jsonl(missing), ParseError);
  const auto bad = temp_file("badlab.jsonl", "{\"id\":\"a\",\"text\":\"x\",\"label\":2}\n");
  EXPECT_THROW(load_labeled_jsonl(bad), ParseError);
}

TEST(WriteJsonl, RoundTrip) {
  const auto c = synthetic::generate_corpus({.n_docs = 50, .seed = 3});
  const auto p = fs::temp_directory_path() / "hatelab_corpus_rt.jsonl";
  write_jsonl(p, c);
  const auto back = load_labeled_jsonl(p);
  ASSERT_EQ(back.size(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(back.posts[i].id, c.posts[i].id);
    EXPECT_EQ(back.posts[i].text, c.posts[i].text);
    EXPECT_EQ(back.posts[i].tokens, c.posts[i].tokens);
    EXPECT_EQ(back.posts[i].meta, c.posts[i].meta);
  }
  EXPECT_EQ(back.labels, c.labels);
}

TEST(Split, StratifiedCounts) {
  const auto c = synthetic::generate_corpus();
  const auto [train, test] = split_stratified(c, 0.2, 42);
  EXPECT_EQ(train.size() + test.size(), c.size());
  const auto pos = c.count_positive();
  const auto neg = c.size() - pos;
  EXPECT_EQ(test.count_positive(), static_cast<std::size_t>(std::llround(pos * 0.2)));
  EXPECT_EQ(test.size() - test.count_positive(), static_cast<std::size_t>(std::llround(neg * 0.2)));
}

TEST(Split, DeterministicAndDisjoint) {
  const auto c = synthetic::generate_corpus({.n_docs = 500});
  const auto a = split_stratified(c, 0.3, 9);
  const auto b = split_stratified(c, 0.3, 9);
  ASSERT_EQ(a.second.size(), b.second.size());
  for (std::size_t i = 0; i < a.second.size(); ++i) EXPECT_EQ(a.second.posts[i].id, b.second.posts[i].id);
  std::set<std::string> ids;
  for (const auto& p : a.first.posts) ids.insert(p.id);
  for (const auto& p : a.second.posts) EXPECT_FALSE(ids.count(p.id)) << p.id;
  const auto other = split_stratified(c, 0.3, 10);
  bool differs = false;
  for (std::size_t i = 0; i < other.second.size(); ++i) differs |= other.second.posts[i].id != a.second.posts[i].id;
  EXPECT_TRUE(differs);
}

TEST(Split, RejectsBadFraction) {
  const auto c = synthetic::generate_corpus({.n_docs = 20});
  EXPECT_THROW(split_stratified(c, 0.0, 1), DomainError);
  EXPECT_THROW(split_stratified(c, 1.0, 1), DomainError);
}
