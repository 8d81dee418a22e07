#pragma once

// Sweeps shared by the unit suites and the acceptance binary. Each returns
// the number of cases examined and how many disagreed with the oracle.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "hatelab/annotation.hpp"
#include "hatelab/classifiers.hpp"
#include "hatelab/eval.hpp"
#include "hatelab/features.hpp"
#include "hatelab/microformer.hpp"
#include "hatelab/random.hpp"
#include "hatelab/synthetic.hpp"
#include "oracles.hpp"

namespace checks {

using namespace hatelab;

struct Tally {
  std::size_t cases = 0;
  std::size_t mismatches = 0;
  std::string first_failure;

  void fail(const std::string& what) {
    if (mismatches++ == 0) first_failure = what;
  }
  bool ok() const { return mismatches == 0 && cases > 0; }
};

// Store driven one score at a time versus the reference, all (s1,s2,s3,theta).
inline Tally annotation_sweep() {
  Tally t;
  for (int theta = 0; theta <= 10; ++theta) {
    AnnotationConfig cfg;
    cfg.theta = theta;
    std::vector<Post> ps;
    std::vector<ScoreTriple> triples;
    for (int s1 = 0; s1 <= 10; ++s1) {
      for (int s2 = 0; s2 <= 10; ++s2) {
        for (int s3 = 0; s3 <= 10; ++s3) {
          ps.push_back(make_post(std::to_string(s1) + "-" + std::to_string(s2) + "-" + std::to_string(s3), ""));
          triples.push_back({s1, s2, s3});
        }
      }
    }
    AnnotationStore store(ps, cfg);
    for (std::size_t i = 0; i < triples.size(); ++i) {
      const auto& tr = triples[i];
      store.submit_score(ps[i].id, {"a", Role::Primary1}, tr.score1);
      auto rec = store.submit_score(ps[i].id, {"b", Role::Primary2}, tr.score2);
      if (rec.state == RecordState::Disputed) rec = store.submit_score(ps[i].id, {"c", Role::ThirdReviewer}, *tr.score3);
      ++t.cases;
      if (rec.final_label != oracle::label_post(tr.score1, tr.score2, tr.score3, theta)) {
        t.fail(ps[i].id + " theta " + std::to_string(theta));
      }
    }
  }
  return t;
}

inline std::vector<TokenList> random_docs(std::uint64_t seed, std::size_t n = 1000) {
  Rng rng(seed);
  std::vector<TokenList> docs;
  for (std::size_t d = 0; d < n; ++d) {
    TokenList doc;
    const auto len = rng.below(21);
    for (std::uint64_t k = 0; k < len; ++k) {
      const double u = rng.uniform();
      doc.push_back("w" + std::to_string(static_cast<int>(u * u * 40)));
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

inline std::vector<double> densify(const SparseVector& v) {
  std::vector<double> out(v.dim, 0.0);
  for (const auto& e : v.entries) out[e.index] = e.value;
  return out;
}

// Count, tf-idf and hashing on 1,000 random docs, plus the unit-norm rule.
inline Tally vectorizer_sweep(std::uint64_t seed = 2024) {
  Tally t;
  const auto docs = random_docs(seed);
  const auto vocab = fit_count(docs);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto& d = docs[i];
    const auto where = "doc " + std::to_string(i);
    ++t.cases;
    if (densify(transform_count(vocab, d)) != oracle::count_vector(vocab.terms(), d)) t.fail(where + " count");

    const auto x = transform_tfidf(vocab, d);
    const auto ref = oracle::tfidf_vector(vocab.terms(), docs, d);
    const auto got = densify(x);
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (std::abs(got[j] - ref[j]) > 1e-12) {
        t.fail(where + " tfidf");
        break;
      }
    }
    const double norm = std::sqrt(squared_norm(x));
    if (x.entries.empty() ? norm != 0.0 : std::abs(norm - 1.0) > 1e-9) t.fail(where + " norm");

    const auto h = transform_hashing(d);
    const auto href = oracle::hashing_vector(d, kDefaultHashDim);
    std::map<std::size_t, double> hgot;
    for (const auto& e : h.entries) hgot[e.index] = e.value;
    if (hgot != href) t.fail(where + " hashing");
  }
  ++t.cases;
  const auto a = transform_hashing({"a"});
  if (a.entries.size() != 1 || a.entries[0].index != oracle::fnv1a("a") % (1u << 18) ||
      oracle::fnv1a("a") != 0xE40C292Cu) {
    t.fail("hashing index of \"a\"");
  }
  return t;
}

// Every confusion matrix with entries in 0..8 against exact rationals.
inline Tally metrics_sweep() {
  Tally t;
  for (std::uint64_t tp = 0; tp <= 8; ++tp) {
    for (std::uint64_t fp = 0; fp <= 8; ++fp) {
      for (std::uint64_t fn = 0; fn <= 8; ++fn) {
        for (std::uint64_t tn = 0; tn <= 8; ++tn) {
          ++t.cases;
          const ConfusionMatrix cm{tp, fp, fn, tn};
          const auto ex = oracle::metrics(static_cast<std::int64_t>(tp), static_cast<std::int64_t>(fp),
                                          static_cast<std::int64_t>(fn), static_cast<std::int64_t>(tn));
          const auto where = std::to_string(tp) + "," + std::to_string(fp) + "," + std::to_string(fn) + "," +
                             std::to_string(tn);
          if (cm.total() == 0) {
            bool threw = false;
            try {
              metrics(cm);
            } catch (const DomainError&) {
              threw = true;
            }
            if (!threw) t.fail(where + " empty matrix accepted");
            continue;
          }
          const auto m = metrics(cm);
          const double got[] = {m.accuracy, m.precision, m.recall, m.f1};
          const oracle::Rational want[] = {ex.accuracy, ex.precision, ex.recall, ex.f1};
          for (int k = 0; k < 4; ++k) {
            if (std::abs(got[k] - want[k].value()) > 1e-12) t.fail(where);
          }
        }
      }
    }
  }
  return t;
}

// Multinomial NB on every micro-dataset with dim <= 3 features, <= 6 docs and
// counts <= 2. The fit depends only on (n0, n1, per-class count sums), so one
// representative dataset per distinct statistic covers every dataset; each is
// queried with every count vector in [0,2]^dim.
inline Tally nb_sweep(std::size_t max_dim = 3) {
  Tally t;
  for (std::size_t dim = 1; dim <= max_dim; ++dim) {
    std::vector<std::vector<int>> queries{{}};
    for (std::size_t f = 0; f < dim; ++f) {
      std::vector<std::vector<int>> next;
      for (const auto& q : queries) {
        for (int c = 0; c <= 2; ++c) {
          next.push_back(q);
          next.back().push_back(c);
        }
      }
      queries = std::move(next);
    }
    for (int n0 = 1; n0 <= 5; ++n0) {
      for (int n1 = 1; n0 + n1 <= 6; ++n1) {
        const int n[2] = {n0, n1};
        // odometer over both class sum vectors
        std::vector<int> sums(2 * dim, 0);
        while (true) {
          std::vector<std::vector<int>> docs;
          std::vector<bool> labels;
          for (int c = 0; c < 2; ++c) {
            std::vector<int> left(sums.begin() + static_cast<std::ptrdiff_t>(c * dim),
                                  sums.begin() + static_cast<std::ptrdiff_t>((c + 1) * dim));
            for (int k = 0; k < n[c]; ++k) {
              std::vector<int> doc(dim);
              for (std::size_t f = 0; f < dim; ++f) {
                doc[f] = std::min(2, left[f]);
                left[f] -= doc[f];
              }
              docs.push_back(doc);
              labels.push_back(c == 1);
            }
          }
          std::vector<SparseVector> rows;
          for (const auto& d : docs) {
            SparseVector v{dim, {}};
            for (std::size_t f = 0; f < dim; ++f) {
              if (d[f]) v.entries.push_back({f, static_cast<double>(d[f])});
            }
            rows.push_back(v);
          }
          const auto model = nb_fit(Dataset::from_sparse(rows, labels));
          for (const auto& q : queries) {
            SparseVector x{dim, {}};
            for (std::size_t f = 0; f < dim; ++f) {
              if (q[f]) x.entries.push_back({f, static_cast<double>(q[f])});
            }
            ++t.cases;
            if (predict(model, x) != oracle::nb_exact_decision(docs, labels, q)) {
              std::string where = "dim " + std::to_string(dim) + " n0 " + std::to_string(n0) + " n1 " +
                                  std::to_string(n1) + " sums";
              for (const int s : sums) where += " " + std::to_string(s);
              t.fail(where);
            }
          }
          std::size_t i = 0;
          for (; i < sums.size(); ++i) {
            const int cap = 2 * n[i / dim];
            if (++sums[i] <= cap) break;
            sums[i] = 0;
          }
          if (i == sums.size()) break;
        }
      }
    }
  }
  return t;
}

// 500 training points on an integer grid (lots of distance ties) and 200
// queries, k in {1,3,5,7}, against a full sort.
inline Tally knn_sweep(std::uint64_t seed = 99) {
  Tally t;
  Rng rng(seed);
  std::vector<std::vector<double>> pts;
  std::vector<bool> labels;
  std::vector<DenseVector> rows;
  for (int i = 0; i < 500; ++i) {
    std::vector<double> p{static_cast<double>(rng.below(12)), static_cast<double>(rng.below(12)),
                          static_cast<double>(rng.below(4))};
    pts.push_back(p);
    rows.push_back({p});
    labels.push_back(rng.uniform() < 0.4);
  }
  const auto data = Dataset::from_dense(rows, labels);
  for (const std::size_t k : {1, 3, 5, 7}) {
    const auto model = knn_fit(data, k);
    for (int q = 0; q < 200; ++q) {
      std::vector<double> p{static_cast<double>(rng.below(12)), static_cast<double>(rng.below(12)),
                            static_cast<double>(rng.below(4))};
      ++t.cases;
      if (predict(model, DenseVector{p}) != oracle::knn_exhaustive(pts, labels, k, p)) {
        t.fail("k " + std::to_string(k) + " query " + std::to_string(q));
      }
    }
  }
  return t;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::string worst;
};

inline Dataset random_linear_data(Rng& rng, std::size_t n, std::size_t dim) {
  std::vector<DenseVector> rows;
  std::vector<bool> labels;
  for (std::size_t i = 0; i < n; ++i) {
    DenseVector v{std::vector<double>(dim)};
    for (auto& x : v.values) x = rng.uniform() < 0.3 ? 0.0 : rng.normal(0, 1);
    rows.push_back(v);
    labels.push_back(rng.uniform() < 0.5);
  }
  return Dataset::from_dense(rows, labels);
}

// Central differences of the objective against the analytic (sub)gradient at
// several random parameter points. For the hinge, points with any margin
// within 1e-3 of the kink are redrawn; the objective is then piecewise
// quadratic around the point, so a wider step is exact and loses less to
// rounding.
inline GradCheck linear_grad_check(bool hinge, std::uint64_t seed = 5) {
  GradCheck out;
  Rng rng(seed);
  const double reg = 0.05, h = hinge ? 1e-4 : 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const auto data = random_linear_data(rng, 30, 6);
    LinearParams m{std::vector<double>(6), 0.0};
    const auto redraw = [&] {
      for (auto& w : m.weights) w = rng.normal(0, 1);
      m.bias = rng.normal(0, 0.5);
    };
    redraw();
    const auto near_kink = [&] {
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double y = data.labels[i] ? 1.0 : -1.0;
        if (std::abs(1.0 - y * m.score(data.features[i])) < 1e-3) return true;
      }
      return false;
    };
    while (hinge && near_kink()) redraw();
    const auto f = [&](const LinearParams& p) {
      return hinge ? svm_objective(data, p, reg) : logreg_objective(data, p, reg);
    };
    const auto g = hinge ? svm_subgradient(data, m, reg) : logreg_gradient(data, m, reg);
    for (std::size_t j = 0; j <= m.weights.size(); ++j) {
      auto plus = m, minus = m;
      double& up = j < m.weights.size() ? plus.weights[j] : plus.bias;
      double& dn = j < m.weights.size() ? minus.weights[j] : minus.bias;
      up += h;
      dn -= h;
      const double fd = (f(plus) - f(minus)) / (2 * h);
      const double an = j < m.weights.size() ? g.weights[j] : g.bias;
      const double err = oracle::rel_error(an, fd, 1e-6);
      ++out.coords;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = (j < m.weights.size() ? "w" + std::to_string(j) : std::string("bias")) + " trial " +
                    std::to_string(trial);
      }
    }
  }
  return out;
}

// Small transformer with adapters on all four attention projections and every
// tensor (base and adapter) marked trainable; B is randomised so the A
// gradient is not identically zero.
inline microformer::TransformerClassifier grad_check_model(std::uint64_t seed = 3) {
  using namespace microformer;
  ModelConfig cfg;
  cfg.vocab_size = 9;
  cfg.max_seq_len = 6;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.d_ff = 12;
  auto m = init_model(cfg, seed);
  // The 0.02 init leaves some paths with ~1e-10 gradients, below what central
  // differences resolve; redraw everything at a scale where every coordinate
  // carries signal.
  Rng rng(derive_seed(seed, 1));
  LoraOptions lo;
  lo.rank = 2;
  lo.alpha = 4.0;
  lo.targets = {Projection::Query, Projection::Key, Projection::Value, Projection::Output};
  m = attach_lora(std::move(m), lo);
  m.for_each_param([&](const std::string& name, Param& p) {
    p.trainable = true;
    const auto rows = static_cast<std::size_t>(p.value.rows()), cols = static_cast<std::size_t>(p.value.cols());
    if (name.ends_with(".gain")) {
      p.value = microformer::detail::normal_tensor(rng, rows, cols, 0.1).array() + 1.0;
    } else if (name.ends_with(".bias")) {
      p.value = microformer::detail::normal_tensor(rng, rows, cols, 0.1);
    } else {
      p.value = microformer::detail::normal_tensor(rng, rows, cols, 0.3);
    }
  });
  return m;
}

inline std::vector<microformer::Example> grad_check_batch() {
  return {{{1, 2, 3, 4}, true}, {{5, 6, 0}, false}, {{7, 8, 1, 2, 3, 5}, true}};
}

// Parameter class of a tensor name: embeddings, attention, lora_A, lora_B,
// feedforward, layernorm, head.
inline std::string param_class(const std::string& name) {
  if (name.ends_with("lora_A")) return "lora_A";
  if (name.ends_with("lora_B")) return "lora_B";
  if (name.find("emb") != std::string::npos) return "embeddings";
  if (name.find(".attn.") != std::string::npos) return "attention";
  if (name.find(".ff") != std::string::npos) return "feedforward";
  if (name.find("ln") != std::string::npos) return "layernorm";
  return "head";
}

// Max relative error per parameter class over every coordinate.
inline std::map<std::string, GradCheck> transformer_grad_check() {
  using namespace microformer;
  auto m = grad_check_model();
  const auto batch = grad_check_batch();
  const auto analytic = loss_and_grads(m, batch);
  std::map<std::string, GradCheck> out;
  const double h = 1e-5;
  std::vector<std::pair<std::string, Param*>> params;
  m.for_each_param([&](const std::string& name, Param& p) { params.emplace_back(name, &p); });
  for (auto& [name, p] : params) {
    const auto& g = analytic.grads.at(name);
    auto& slot = out[param_class(name)];
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double keep = x;
      x = keep + h;
      const double up = loss(m, batch);
      x = keep - h;
      const double dn = loss(m, batch);
      x = keep;
      const double fd = (up - dn) / (2 * h);
      const double err = oracle::rel_error(g.data()[i], fd, 1e-6);
      ++slot.coords;
      if (err > slot.max_rel_error) {
        slot.max_rel_error = err;
        slot.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

inline std::vector<std::size_t> random_ids(Rng& rng, const microformer::ModelConfig& cfg) {
  std::vector<std::size_t> ids(1 + rng.below(cfg.max_seq_len));
  for (auto& id : ids) id = static_cast<std::size_t>(rng.below(cfg.vocab_size));
  return ids;
}

inline std::vector<microformer::Example> sequence_fixture(std::size_t n = 64) {
  std::vector<microformer::Example> out;
  for (auto& e : synthetic::make_sequence_fixture({.n_examples = n})) out.push_back({std::move(e.ids), e.label});
  return out;
}

inline bool same_logits(const microformer::TransformerClassifier& a, const microformer::TransformerClassifier& b,
                        std::span<const std::size_t> ids) {
  return microformer::forward(a, ids) == microformer::forward(b, ids);
}

struct LoraCheck {
  std::size_t identity_mismatches = 0;  // adapted vs base at B = 0, exact
  double merge_max_rel_error = 0.0;     // merged vs adapted after training
  bool base_untouched = false;          // base tensors bit-identical after training
};

// Default config, r = 8 on Q and V. Identity is checked on 100 random inputs
// right after attaching; the adapted model is then trained a few epochs on
// the sequence fixture and compared with its merged form on 100 more.
inline LoraCheck lora_check(std::uint64_t seed = 1) {
  using namespace microformer;
  LoraCheck out;
  const auto base = init_model(ModelConfig{}, seed);
  auto adapted = attach_lora(base, {});
  Rng rng(derive_seed(seed, 77));
  for (int i = 0; i < 100; ++i) {
    const auto ids = random_ids(rng, base.config);
    if (!same_logits(base, adapted, ids)) ++out.identity_mismatches;
  }
  const auto data = sequence_fixture();
  train(adapted, data, {.epochs = 5, .lr = 0.05, .batch_size = 8, .seed = seed, .mode = TrainMode::Lora});
  const auto merged = merge_lora(adapted);
  for (int i = 0; i < 100; ++i) {
    const auto ids = random_ids(rng, base.config);
    const auto za = forward(adapted, ids), zm = forward(merged, ids);
    for (int c = 0; c < 2; ++c) out.merge_max_rel_error = std::max(out.merge_max_rel_error, oracle::rel_error(za(c), zm(c)));
  }
  // The head trains alongside the adapters by default; every other base
  // tensor must come back bit-identical.
  std::map<std::string, const Tensor*> before;
  base.for_each_param([&](const std::string& name, const Param& p) { before[name] = &p.value; });
  std::size_t compared = 0;
  bool same = true;
  adapted.for_each_param([&](const std::string& name, const Param& p) {
    if (!before.count(name) || name.starts_with("head.")) return;
    ++compared;
    same = same && p.value == *before[name];
  });
  out.base_untouched = same && compared + 2 == before.size();
  return out;
}

struct TimingCheck {
  double full_seconds = 0.0;  // median per-epoch
  double lora_seconds = 0.0;
  double ratio = 0.0;
  std::size_t full_trainable = 0;
  std::size_t lora_trainable = 0;
};

// Per-epoch wall clock on the 64-example fixture with the default config.
// Full and LoRA epochs are interleaved so both see the same machine load;
// medians over `rounds` epochs each.
inline TimingCheck lora_timing(std::size_t rounds = 15, std::uint64_t seed = 7) {
  using namespace microformer;
  TimingCheck out;
  const auto data = sequence_fixture();
  auto full = init_model(ModelConfig{}, seed);
  auto lora = attach_lora(full, {});
  std::vector<double> tf, tl;
  for (std::size_t r = 0; r < rounds; ++r) {
    const auto rf = train(full, data, {.epochs = 1, .seed = r, .mode = TrainMode::Full});
    const auto rl = train(lora, data, {.epochs = 1, .seed = r, .mode = TrainMode::Lora});
    tf.push_back(rf.epochs[0].seconds);
    tl.push_back(rl.epochs[0].seconds);
    out.full_trainable = rf.trainable_params;
    out.lora_trainable = rl.trainable_params;
  }
  const auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  out.full_seconds = median(tf);
  out.lora_seconds = median(tl);
  out.ratio = out.lora_seconds / out.full_seconds;
  return out;
}

}  // namespace checks
