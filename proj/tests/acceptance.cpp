// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>

#include "checks.hpp"

#ifndef HATELAB_CLI
#error "HATELAB_CLI must name the hatelab binary"
#endif
#ifndef HATELAB_DATA_DIR
#error "HATELAB_DATA_DIR must name the bundled data directory"
#endif

using namespace hatelab;
namespace fs = std::filesystem;

namespace {

// Frozen from the first validated run on the bundled fixture (accuracy 0.9875,
// F1 0.9701), five points below what was observed.
constexpr double kFrozenAccuracy = 0.9375;
constexpr double kFrozenF1 = 0.9201;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string tally_detail(const checks::Tally& t) {
  std::string s = std::to_string(t.cases) + " cases, " + std::to_string(t.mismatches) + " mismatches";
  if (t.mismatches) s += " (first: " + t.first_failure + ")";
  return s;
}

Outcome annotation() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto t = checks::annotation_sweep();
  const double secs = seconds_since(t0);
  return {t.ok() && t.cases == 14641 && secs < 5.0, tally_detail(t) + ", " + fmt("%.2fs", secs)};
}

Outcome vectorizers() {
  const auto t = checks::vectorizer_sweep();
  return {t.ok() && t.cases == 1001, tally_detail(t)};
}

Outcome metrics_oracle() {
  const auto t = checks::metrics_sweep();
  const auto degenerate = metrics(ConfusionMatrix{0, 0, 7, 9});
  const bool zeros = format_metric(degenerate.precision) == "0.00" && format_metric(degenerate.recall) == "0.00" &&
                     format_metric(degenerate.f1) == "0.00";
  return {t.ok() && t.cases == 6561 && zeros, tally_detail(t) + (zeros ? ", 0/0 -> 0.00" : ", 0/0 not 0.00")};
}

Outcome classical() {
  const auto nb = checks::nb_sweep(3);
  const auto knn = checks::knn_sweep();
  const auto lr = checks::linear_grad_check(false);
  const auto svm = checks::linear_grad_check(true);
  const bool ok = nb.ok() && knn.ok() && lr.max_rel_error < 1e-5 && svm.max_rel_error < 1e-5;
  return {ok, "nb " + tally_detail(nb) + "; knn " + tally_detail(knn) + "; lr grad " +
                  fmt("%.1e", lr.max_rel_error) + ", svm grad " + fmt("%.1e", svm.max_rel_error)};
}

Outcome end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto corpus = load_labeled_jsonl(std::string(HATELAB_DATA_DIR) + "/synthetic_corpus.jsonl");
  GridCell cell;
  cell.model.kind = ModelKind::LogisticRegression;
  cell.embedding.kind = EmbeddingKind::Tfidf;
  const auto report = run_grid(corpus, {cell}, {.test_fraction = 0.2, .seed = 42});
  const double secs = seconds_since(t0);
  const auto& m = *report.rows.at(0).metrics;
  const bool ok = m.accuracy >= 0.90 && m.f1 >= 0.70 && m.accuracy >= kFrozenAccuracy && m.f1 >= kFrozenF1 &&
                  secs < 60.0;
  return {ok, std::to_string(corpus.size()) + " posts, accuracy " + fmt("%.4f", m.accuracy) + ", f1 " +
                  fmt("%.4f", m.f1) + ", " + fmt("%.2fs", secs)};
}

Outcome lora_identity_merge() {
  const auto c = checks::lora_check();
  const bool ok = c.identity_mismatches == 0 && c.merge_max_rel_error < 1e-9 && c.base_untouched;
  return {ok, "identity mismatches " + std::to_string(c.identity_mismatches) + ", merge rel err " +
                  fmt("%.1e", c.merge_max_rel_error) + ", base " + (c.base_untouched ? "unchanged" : "CHANGED")};
}

Outcome transformer_gradients() {
  const auto res = checks::transformer_grad_check();
  bool ok = res.size() == 7;
  std::string detail;
  for (const auto& [cls, g] : res) {
    ok = ok && g.coords > 0 && g.max_rel_error < 1e-4;
    detail += cls + " " + fmt("%.1e", g.max_rel_error) + ", ";
  }
  auto m = microformer::init_model({}, 5);
  m.head.weight.value.setZero();
  m.head.bias.value.setZero();
  const double l = microformer::loss(m, checks::sequence_fixture(10));
  const double gap = std::abs(l - std::numbers::ln2);
  ok = ok && gap < 1e-9;
  return {ok, detail + "zero-head loss - ln2 = " + fmt("%.1e", gap)};
}

Outcome parameter_efficiency() {
  const auto t = checks::lora_timing();
  const double frac = static_cast<double>(t.lora_trainable) / static_cast<double>(t.full_trainable);
  const bool ok = frac < 0.10 && t.ratio <= 0.8;
  return {ok, "trainable " + std::to_string(t.lora_trainable) + "/" + std::to_string(t.full_trainable) + " = " +
                  fmt("%.2f%%", 100 * frac) + ", epoch " + fmt("%.4fs", t.lora_seconds) + " vs " +
                  fmt("%.4fs", t.full_seconds) + " (ratio " + fmt("%.2f", t.ratio) + ")"};
}

Outcome determinism() {
  const auto dir = fs::temp_directory_path() / "hatelab_acceptance";
  fs::create_directories(dir);
  const auto data = std::string(HATELAB_DATA_DIR);
  std::string outputs[2];
  for (int i = 0; i < 2; ++i) {
    const auto out = dir / ("report_" + std::to_string(i) + ".csv");
    fs::remove(out);
    const std::string cmd = std::string("'") + HATELAB_CLI + "' train-eval --input " + data +
                            "/synthetic_corpus.jsonl --grid " + data + "/grid.txt --embedding word2vec=" + data +
                            "/word2vec.txt --embedding glove=" + data + "/glove.txt --seed 42 --output " +
                            out.string() + " 2>/dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "train-eval run " + std::to_string(i + 1) + " failed"};
    std::ifstream in(out, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    outputs[i] = s.str();
  }
  const auto rows = std::count(outputs[0].begin(), outputs[0].end(), '\n');
  const bool ok = !outputs[0].empty() && outputs[0] == outputs[1];
  return {ok, std::to_string(rows) + " lines, " + (ok ? "byte-identical" : "DIFFERENT")};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"annotation-state-machine-oracle", annotation},
      {"vectorizer-oracles", vectorizers},
      {"metrics-oracle", metrics_oracle},
      {"classical-model-oracles", classical},
      {"synthetic-corpus-end-to-end", end_to_end},
      {"lora-identity-and-merge", lora_identity_merge},
      {"transformer-gradient-check", transformer_gradients},
      {"parameter-efficiency", parameter_efficiency},
      {"train-eval-determinism", determinism},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
