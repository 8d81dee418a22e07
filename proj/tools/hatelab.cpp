// hatelab: ingest, annotate, export, evaluate, fine-tune.

#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <pthread.h>

#include "CLI11.hpp"

// Eigen before httplib: <resolv.h> defines a _res macro that breaks Eigen.
#include "hatelab/microformer.hpp"
#include "hatelab/annotation.hpp"
#include "hatelab/annotation_service.hpp"
#include "hatelab/corpus.hpp"
#include "hatelab/eval.hpp"
#include "hatelab/synthetic.hpp"

namespace fs = std::filesystem;
using namespace hatelab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitDomain = 1;
constexpr int kExitIo = 2;

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw IoError(path + ": not found");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw IoError(path.string() + ": write failed");
}

fs::path state_log_path(const std::string& explicit_path) {
  if (!explicit_path.empty()) return explicit_path;
  const char* dir = std::getenv("HATELAB_STATE_DIR");
  const fs::path base = dir && *dir ? fs::path(dir) : fs::path(".hatelab");
  return base / "annotations.log";
}

AnnotationStore open_store(const std::string& corpus, const std::string& state, int theta) {
  require_file(corpus);
  auto posts = load_jsonl(corpus);
  const auto log = state_log_path(state);
  if (log.has_parent_path()) fs::create_directories(log.parent_path());
  AnnotationConfig cfg;
  cfg.theta = theta;
  return AnnotationStore::open(std::move(posts), cfg, log);
}

// --- ingest ---------------------------------------------------------------

struct IngestArgs {
  std::string input, output;
};

int cmd_ingest(const IngestArgs& a) {
  require_file(a.input);
  const auto records = read_corpus_records(fs::path(a.input));
  std::ostringstream out;
  for (const auto& r : records) out << to_jsonl_line(r.post, r.label) << '\n';
  if (a.output.empty()) {
    std::cout << out.str();
  } else {
    write_text(a.output, out.str());
    std::cerr << "ingested " << records.size() << " posts into " << a.output << '\n';
  }
  return kExitOk;
}

// --- annotate-serve -------------------------------------------------------

struct ServeArgs {
  std::string input, state, host = "127.0.0.1";
  int port = 8080;
  int theta = 6;
};

int cmd_annotate_serve(const ServeArgs& a) {
  // Signals are consumed by a dedicated thread so the server can shut down
  // cleanly; block them before any other thread exists.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  auto store = open_store(a.input, a.state, a.theta);
  AnnotationService service(store);
  const int port = service.bind(a.host, a.port);
  std::cerr << "serving " << store.size() << " posts on http://" << a.host << ":" << port << " (theta "
            << a.theta << ", state " << state_log_path(a.state).string() << ")\n";

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    service.stop();
  });
  service.serve();
  if (waiter.joinable()) {
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
  }
  return kExitOk;
}

// --- export-labels --------------------------------------------------------

struct ExportArgs {
  std::string input, state, output;
  int theta = 6;
};

int cmd_export_labels(const ExportArgs& a) {
  const auto log = state_log_path(a.state);
  require_file(log.string());
  auto store = open_store(a.input, a.state, a.theta);
  const auto labeled = store.export_labels();
  std::ostringstream out;
  for (std::size_t i = 0; i < labeled.size(); ++i) out << to_jsonl_line(labeled.posts[i], labeled.labels[i]) << '\n';
  if (a.output.empty()) {
    std::cout << out.str();
  } else {
    write_text(a.output, out.str());
  }
  std::cerr << "exported " << labeled.size() << " of " << store.size() << " posts\n";
  return kExitOk;
}

// --- train-eval -----------------------------------------------------------

struct TrainEvalArgs {
  std::string input, output, grid;
  std::string format = "csv";
  std::vector<std::string> embeddings;  // name=path
  std::uint64_t seed = 42;
  double test_fraction = 0.2;
  std::size_t knn_k = 5;
  std::size_t trees = 100;
  std::size_t hash_bits = 18;
};

std::map<EmbeddingKind, std::shared_ptr<const EmbeddingTable>> load_tables(const std::vector<std::string>& specs) {
  std::map<EmbeddingKind, std::shared_ptr<const EmbeddingTable>> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw DomainError("--embedding expects name=path, got '" + s + "'");
    const auto name = s.substr(0, eq);
    const auto kind = parse_embedding_name(name);
    if (!kind || (*kind != EmbeddingKind::Word2Vec && *kind != EmbeddingKind::GloVe)) {
      throw DomainError("--embedding: '" + name + "' is not a pretrained embedding (valid: word2vec, glove)");
    }
    const auto path = s.substr(eq + 1);
    require_file(path);
    out[*kind] = std::make_shared<const EmbeddingTable>(load_embeddings(path));
  }
  return out;
}

std::vector<GridCell> build_grid(const TrainEvalArgs& a,
                                  const std::map<EmbeddingKind, std::shared_ptr<const EmbeddingTable>>& tables) {
  std::vector<GridEntry> entries;
  if (!a.grid.empty()) {
    require_file(a.grid);
    std::ifstream in(a.grid);
    entries = parse_grid(in);
  } else {
    for (const auto m : kAllModels) {
      for (const auto e : kAllEmbeddings) {
        const bool dense = e == EmbeddingKind::Word2Vec || e == EmbeddingKind::GloVe;
        if (!dense || tables.count(e)) entries.push_back({m, e});
      }
    }
  }
  if (a.hash_bits < 8 || a.hash_bits > 24) throw DomainError("--hash-bits must lie in 8..24");
  std::vector<GridCell> grid;
  for (const auto& e : entries) {
    GridCell c;
    c.model.kind = e.model;
    c.model.logreg.seed = a.seed;
    c.model.svm.seed = a.seed;
    c.model.forest.seed = a.seed;
    c.model.forest.n_trees = a.trees;
    c.model.knn_k = a.knn_k;
    c.embedding.kind = e.embedding;
    c.embedding.hash_dim = std::size_t{1} << a.hash_bits;
    if (const auto it = tables.find(e.embedding); it != tables.end()) c.embedding.table = it->second;
    if ((e.embedding == EmbeddingKind::Word2Vec || e.embedding == EmbeddingKind::GloVe) && !c.embedding.table) {
      throw DomainError("grid uses '" + std::string(short_name(e.embedding)) + "' but no --embedding " +
                        std::string(short_name(e.embedding)) + "=<path> was given");
    }
    grid.push_back(std::move(c));
  }
  return grid;
}

fs::path companion_path(const fs::path& p, ReportFormat other) {
  auto q = p;
  q.replace_extension(other == ReportFormat::Csv ? ".csv" : ".md");
  if (q == p) q += other == ReportFormat::Csv ? ".csv" : ".md";
  return q;
}

int cmd_train_eval(const TrainEvalArgs& a) {
  require_file(a.input);
  const auto tables = load_tables(a.embeddings);
  const auto grid = build_grid(a, tables);
  auto corpus = load_labeled_jsonl(a.input);
  const auto report = run_grid(corpus, grid, SplitParams{a.test_fraction, a.seed});
  const auto fmt = a.format == "md" ? ReportFormat::Markdown : ReportFormat::Csv;
  const auto other = fmt == ReportFormat::Csv ? ReportFormat::Markdown : ReportFormat::Csv;
  if (a.output.empty()) {
    std::cout << emit_report(report, fmt);
  } else {
    write_text(a.output, emit_report(report, fmt));
    const auto second = companion_path(a.output, other);
    write_text(second, emit_report(report, other));
    std::cerr << "wrote " << a.output << " and " << second.string() << " (" << report.rows.size() << " rows, "
              << report.n_train << " train / " << report.n_test << " test)\n";
  }
  return kExitOk;
}

// --- finetune -------------------------------------------------------------

struct FinetuneArgs {
  std::string input, output, adapters, base, report;
  std::string mode = "full";
  std::uint64_t seed = 42;
  std::size_t epochs = 3;
  double lr = 0.05;
  std::size_t batch_size = 8;
  std::size_t rank = 8;
  double alpha = 16.0;
  std::size_t vocab_terms = 8192;
  std::size_t d_model = 64, heads = 4, layers = 2, d_ff = 256, max_len = 64;
  double test_fraction = 0.2;
};

std::vector<microformer::Example> encode(const LabeledCorpus& c, const microformer::TokenVocab& vocab,
                                         std::size_t max_len) {
  std::vector<microformer::Example> out;
  for (std::size_t i = 0; i < c.size(); ++i) out.push_back({vocab.encode(c.posts[i].tokens, max_len), c.labels[i]});
  return out;
}

int cmd_finetune(const FinetuneArgs& a) {
  namespace mf = microformer;
  require_file(a.input);
  if (!a.base.empty()) require_file(a.base);
  if (a.mode != "full" && a.mode != "lora") throw DomainError("--mode must be full or lora");
  const auto corpus = load_labeled_jsonl(a.input);
  const auto [train, test] = split_stratified(corpus, a.test_fraction, a.seed);

  std::vector<TokenList> docs;
  for (const auto& p : train.posts) docs.push_back(p.tokens);
  const auto vocab = mf::TokenVocab::build(docs, a.vocab_terms);

  mf::TransformerClassifier model;
  if (!a.base.empty()) {
    model = mf::load_checkpoint(a.base);
    if (model.config.vocab_size < vocab.size()) {
      throw DomainError("base checkpoint vocabulary (" + std::to_string(model.config.vocab_size) +
                        ") is smaller than the corpus vocabulary (" + std::to_string(vocab.size()) + ")");
    }
  } else {
    mf::ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.d_model = a.d_model;
    cfg.n_heads = a.heads;
    cfg.n_layers = a.layers;
    cfg.d_ff = a.d_ff;
    cfg.max_seq_len = a.max_len;
    model = mf::init_model(cfg, derive_seed(a.seed, 100));
  }
  const auto train_ex = encode(train, vocab, model.config.max_seq_len);
  const auto test_ex = encode(test, vocab, model.config.max_seq_len);

  mf::TrainOptions opt;
  opt.epochs = a.epochs;
  opt.lr = a.lr;
  opt.batch_size = a.batch_size;
  opt.seed = a.seed;
  opt.mode = a.mode == "lora" ? mf::TrainMode::Lora : mf::TrainMode::Full;
  opt.lora.rank = a.rank;
  opt.lora.alpha = a.alpha;
  opt.lora.seed = derive_seed(a.seed, 101);
  const auto rep = mf::train(model, train_ex, opt);

  std::ostringstream csv;
  csv << "epoch,loss,train_accuracy,seconds\n";
  for (std::size_t e = 0; e < rep.epochs.size(); ++e) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.4f,%.3f\n", e + 1, rep.epochs[e].loss, rep.epochs[e].accuracy,
                  rep.epochs[e].seconds);
    csv << buf;
  }
  std::cout << csv.str();
  std::cout << "mode " << a.mode << ": trainable " << rep.trainable_params << " of " << rep.total_params
            << " parameters; test accuracy " << format_metric(mf::accuracy(model, test_ex)) << '\n';
  if (!a.report.empty()) write_text(a.report, csv.str());

  if (!a.output.empty()) {
    mf::save_checkpoint(a.output, model);
    std::ostringstream v;
    for (const auto& t : vocab.terms()) v << t << '\n';
    write_text(fs::path(a.output).string() + ".vocab", v.str());
  }
  if (!a.adapters.empty()) {
    if (!model.has_adapters()) throw DomainError("--adapters needs --mode lora");
    mf::save_adapters(a.adapters, model);
  }
  return kExitOk;
}

// --- make-fixtures --------------------------------------------------------

struct FixtureArgs {
  std::string output = "data";
  std::uint64_t seed = 42;
  std::size_t n_docs = 2000;
  std::size_t dim = 25;
};

int cmd_make_fixtures(const FixtureArgs& a) {
  const fs::path dir(a.output);
  fs::create_directories(dir);
  synthetic::CorpusOptions copt;
  copt.n_docs = a.n_docs;
  copt.seed = a.seed;
  const auto corpus = synthetic::generate_corpus(copt);
  write_jsonl(dir / "synthetic_corpus.jsonl", corpus);
  const auto terms = synthetic::corpus_terms(corpus);
  for (const auto flavor : {synthetic::EmbeddingFlavor::Word2Vec, synthetic::EmbeddingFlavor::GloVe}) {
    const auto table = synthetic::make_embeddings(terms, a.dim, flavor, a.seed);
    std::ostringstream out;
    synthetic::write_embeddings(out, terms, table);
    write_text(dir / (flavor == synthetic::EmbeddingFlavor::Word2Vec ? "word2vec.txt" : "glove.txt"), out.str());
  }
  std::ostringstream grid;
  grid << "# model,embedding\n";
  for (const auto m : kAllModels) {
    for (const auto e : kAllEmbeddings) grid << short_name(m) << ',' << short_name(e) << '\n';
  }
  write_text(dir / "grid.txt", grid.str());
  std::cerr << "wrote " << corpus.size() << " posts (" << corpus.count_positive() << " positive) to " << dir.string()
            << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hatelab: annotation, feature extraction and classifier evaluation"};
  app.require_subcommand(1);

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Normalize a raw JSONL corpus");
  c_ingest->add_option("--input", ingest.input, "Raw JSONL corpus")->required();
  c_ingest->add_option("--output", ingest.output, "Normalized JSONL (stdout if omitted)");

  ServeArgs serve;
  auto* c_serve = app.add_subcommand("annotate-serve", "Serve the annotation HTTP API");
  c_serve->add_option("--input", serve.input, "Corpus to annotate")->required();
  c_serve->add_option("--state", serve.state, "Event log (default $HATELAB_STATE_DIR/annotations.log)");
  c_serve->add_option("--port", serve.port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  c_serve->add_option("--host", serve.host, "Bind address");
  c_serve->add_option("--theta", serve.theta, "Label threshold")->check(CLI::Range(0, 10));

  ExportArgs exp;
  auto* c_export = app.add_subcommand("export-labels", "Write resolved labels as a labeled corpus");
  c_export->add_option("--input", exp.input, "Corpus that was annotated")->required();
  c_export->add_option("--state", exp.state, "Event log (default $HATELAB_STATE_DIR/annotations.log)");
  c_export->add_option("--output", exp.output, "Labeled JSONL (stdout if omitted)");
  c_export->add_option("--theta", exp.theta, "Label threshold")->check(CLI::Range(0, 10));

  TrainEvalArgs te;
  auto* c_te = app.add_subcommand("train-eval", "Evaluate a model x embedding grid");
  c_te->add_option("--input", te.input, "Labeled JSONL corpus")->required();
  c_te->add_option("--output", te.output, "Report path; the other format is written next to it");
  c_te->add_option("--grid", te.grid, "Grid file, one model,embedding per line (default: full grid)");
  c_te->add_option("--format", te.format, "Report format")->check(CLI::IsMember({"csv", "md"}));
  c_te->add_option("--embedding", te.embeddings, "Pretrained vectors, name=path (word2vec, glove)");
  c_te->add_option("--seed", te.seed, "Seed for the split and every model");
  c_te->add_option("--test-fraction", te.test_fraction, "Held-out fraction")->check(CLI::Range(0.0, 1.0));
  c_te->add_option("--knn-k", te.knn_k, "Neighbours for k-NN (odd)");
  c_te->add_option("--trees", te.trees, "Random forest size")->check(CLI::PositiveNumber);
  c_te->add_option("--hash-bits", te.hash_bits, "Hashing vectorizer uses 2^bits buckets");

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Train the small transformer classifier (full or LoRA)");
  c_ft->add_option("--input", ft.input, "Labeled JSONL corpus")->required();
  c_ft->add_option("--output", ft.output, "Checkpoint path (base weights)");
  c_ft->add_option("--adapters", ft.adapters, "Adapter file (lora mode)");
  c_ft->add_option("--base", ft.base, "Start from this checkpoint");
  c_ft->add_option("--report", ft.report, "Per-epoch CSV");
  c_ft->add_option("--mode", ft.mode, "full or lora")->check(CLI::IsMember({"full", "lora"}));
  c_ft->add_option("--seed", ft.seed);
  c_ft->add_option("--epochs", ft.epochs)->check(CLI::PositiveNumber);
  c_ft->add_option("--lr", ft.lr)->check(CLI::PositiveNumber);
  c_ft->add_option("--batch-size", ft.batch_size)->check(CLI::PositiveNumber);
  c_ft->add_option("--rank", ft.rank)->check(CLI::PositiveNumber);
  c_ft->add_option("--alpha", ft.alpha)->check(CLI::PositiveNumber);
  c_ft->add_option("--vocab-terms", ft.vocab_terms)->check(CLI::PositiveNumber);
  c_ft->add_option("--d-model", ft.d_model)->check(CLI::PositiveNumber);
  c_ft->add_option("--heads", ft.heads)->check(CLI::PositiveNumber);
  c_ft->add_option("--layers", ft.layers);
  c_ft->add_option("--d-ff", ft.d_ff)->check(CLI::PositiveNumber);
  c_ft->add_option("--max-len", ft.max_len)->check(CLI::PositiveNumber);
  c_ft->add_option("--test-fraction", ft.test_fraction)->check(CLI::Range(0.0, 1.0));

  FixtureArgs fx;
  auto* c_fx = app.add_subcommand("make-fixtures", "Generate the synthetic corpus, embeddings and grid file");
  c_fx->add_option("--output", fx.output, "Output directory");
  c_fx->add_option("--seed", fx.seed);
  c_fx->add_option("--docs", fx.n_docs)->check(CLI::PositiveNumber);
  c_fx->add_option("--dim", fx.dim)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitDomain;
  }

  try {
    if (c_ingest->parsed()) return cmd_ingest(ingest);
    if (c_serve->parsed()) return cmd_annotate_serve(serve);
    if (c_export->parsed()) return cmd_export_labels(exp);
    if (c_te->parsed()) return cmd_train_eval(te);
    if (c_ft->parsed()) return cmd_finetune(ft);
    if (c_fx->parsed()) return cmd_make_fixtures(fx);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDomain;
  }
  return kExitDomain;
}
