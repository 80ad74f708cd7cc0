#pragma once

#include "tqnet/checkpoint.hpp"
#include "tqnet/finetune.hpp"

namespace tqnet::evaluate {

using ad::Mat;
using json = nlohmann::json;

// id -> ranked candidate ids (best first)
using PredictionMap = std::map<std::string, std::vector<std::string>>;

struct EvalReport {
  std::string task;    // "similar" | "kp"
  std::string subset;  // "all" | "tt" | "ti" | "ii" | ""
  std::map<std::string, double> metrics;
  int k = 5;
  int n_queries = 0;
  std::string checkpoint_id;
  std::uint64_t seed = 0;
  bool clamped = false;  // some queries had fewer than k ground-truth similars

  json to_json() const {
    json m = json::object();
    for (const auto& [name, v] : metrics) m[name] = v;
    return json{{"task", task},   {"subset", subset},
                {"metric", m},    {"k", k},
                {"n_queries", n_queries}, {"checkpoint_id", checkpoint_id},
                {"seed", seed},   {"clamped", clamped}};
  }
};

// eval-mode embeddings for the given ids, row-ordered to match
inline Mat embed_corpus(const checkpoint::Checkpoint& ck, const model::TQNet& net,
                        const corpus::CorpusBundle& bundle, const corpus::TokenVocab& vocab,
                        const std::vector<std::string>& ids) {
  if (ck.vocab_hash != vocab.content_hash())
    throw IntegrityError("embed_corpus: checkpoint vocab hash does not match corpus vocab");
  const auto fusion = model::fusion_from(ck.fusion);
  const auto modality = ck.modality == "text_only" ? model::Modality::text_only
                                                   : model::Modality::full;
  Mat out(Eigen::Index(ids.size()), net.config().d_model);
  const int chunk = 32;
  for (std::size_t at = 0; at < ids.size(); at += chunk) {
    model::Batch batch;
    for (std::size_t i = at; i < std::min(ids.size(), at + chunk); ++i)
      batch.push_back(corpus::encode_question(bundle.by_id(ids[i]), vocab,
                                              net.config().max_len, bundle.root,
                                              net.config().image_size));
    Mat e = net.embed_batch(ck.params, batch, fusion, modality).value();
    out.middleRows(Eigen::Index(at), e.rows()) = e;
  }
  return out;
}

// rank candidates per query by a caller-supplied score; ties broken by
// ascending candidate id, self excluded
inline PredictionMap retrieve_topk_scored(
    const std::vector<std::string>& ids, const std::vector<int>& queries,
    const std::vector<int>& candidates, int k,
    const std::function<double(int, int)>& score) {
  if (k > int(candidates.size()) - 1)
    throw ArgumentError("retrieve_topk: k exceeds candidate pool");
  PredictionMap out;
  for (int qi : queries) {
    std::vector<std::pair<double, std::string>> scored;
    for (int ci : candidates) {
      if (ci == qi) continue;
      scored.emplace_back(score(qi, ci), ids[std::size_t(ci)]);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    auto& ranked = out[ids[std::size_t(qi)]];
    for (int j = 0; j < k; ++j) ranked.push_back(scored[std::size_t(j)].second);
  }
  return out;
}

// cosine-similarity retrieval; embeddings are unit-norm so dot product suffices
inline PredictionMap retrieve_topk(const Mat& embeddings, const std::vector<std::string>& ids,
                                   const std::vector<int>& queries,
                                   const std::vector<int>& candidates, int k) {
  return retrieve_topk_scored(ids, queries, candidates, k, [&](int a, int b) {
    return embeddings.row(a).dot(embeddings.row(b));
  });
}

// P@k: mean over queries of |gt_k intersect pred_k| / |gt_k| with the
// ground-truth set truncated to at most k elements
inline double precision_at_k(const PredictionMap& pred,
                             const corpus::SimilarityGroundTruth& gt, int k) {
  if (pred.empty()) throw ArgumentError("precision_at_k: empty prediction map");
  double total = 0.0;
  for (const auto& [id, ranked] : pred) {
    if (!gt.contains(id))
      throw IntegrityError("precision_at_k: query missing from ground truth: " + id);
    const auto& sims = gt.similars(id);
    const int denom = std::min<int>(k, int(sims.size()));
    int hits = 0;
    for (int j = 0; j < std::min<int>(k, int(ranked.size())); ++j)
      if (sims.count(ranked[std::size_t(j)])) ++hits;
    total += double(std::min(hits, denom)) / denom;
  }
  return total / double(pred.size());
}

enum class Subset { all, tt, ti, ii };

inline Subset subset_from(const std::string& s) {
  if (s == "all") return Subset::all;
  if (s == "tt") return Subset::tt;
  if (s == "ti") return Subset::ti;
  if (s == "ii") return Subset::ii;
  throw ArgumentError("unknown subset: " + s);
}
inline std::string subset_name(Subset s) {
  switch (s) {
    case Subset::all: return "all";
    case Subset::tt: return "tt";
    case Subset::ti: return "ti";
    case Subset::ii: return "ii";
  }
  throw ArgumentError("bad subset");
}

// Similar-question retrieval on the test pool, optionally restricted to a
// pair-structure subset (tt / ti / ii by image presence on both sides).
inline EvalReport eval_similar(const checkpoint::Checkpoint& ck, const model::TQNet& net,
                               const corpus::CorpusBundle& bundle,
                               const corpus::TokenVocab& vocab, Subset subset, int k = 5) {
  auto pair_in_subset = [&](const corpus::PairLabel& p) {
    const bool ia = !bundle.by_id(p.a).images.empty();
    const bool ib = !bundle.by_id(p.b).images.empty();
    switch (subset) {
      case Subset::all: return true;
      case Subset::tt: return !ia && !ib;
      case Subset::ti: return ia != ib;
      case Subset::ii: return ia && ib;
    }
    return false;
  };
  corpus::SimilarityGroundTruth gt;
  std::set<std::string> pool_set;
  for (const auto& p : bundle.pairs_test) {
    if (p.label != 1 || !pair_in_subset(p)) continue;
    gt.add(p.a, p.b);
    pool_set.insert(p.a);
    pool_set.insert(p.b);
  }
  if (gt.size() == 0)
    throw ArgumentError("eval_similar: subset '" + subset_name(subset) +
                        "' has no positive pairs in this corpus");

  std::vector<std::string> ids(pool_set.begin(), pool_set.end());
  Mat emb = embed_corpus(ck, net, bundle, vocab, ids);
  std::vector<int> all_idx(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) all_idx[i] = int(i);

  EvalReport rep;
  rep.task = "similar";
  rep.subset = subset_name(subset);
  rep.k = k;
  rep.checkpoint_id = ck.id();
  rep.seed = ck.seed;

  const int k_eff = std::min(k, int(ids.size()) - 1);
  PredictionMap pred;
  if (ck.method == "pair" && ck.params.count("pair.fc1.w")) {
    // pair baseline ranks by head probability, not raw cosine
    const nn::Parameters& p = ck.params;
    pred = retrieve_topk_scored(ids, all_idx, all_idx, k_eff, [&](int a, int b) {
      ad::Var u(Mat(emb.row(a)));
      ad::Var v(Mat(emb.row(b)));
      return finetune::pair_logit(p, u, v).scalar();
    });
  } else {
    pred = retrieve_topk(emb, ids, all_idx, all_idx, k_eff);
  }
  for (const auto& id : ids)
    if (int(gt.similars(id).size()) < k) rep.clamped = true;

  rep.n_queries = int(pred.size());
  rep.metrics["p_at_k"] = precision_at_k(pred, gt, k_eff);
  return rep;
}

// Frozen-feature knowledge-point probe: linear softmax classifier on train
// embeddings, micro/macro F1 on the test split.
inline EvalReport eval_kp(const checkpoint::Checkpoint& ck, const model::TQNet& net,
                          const corpus::CorpusBundle& bundle, const corpus::TokenVocab& vocab,
                          int batch_size = 64, int epochs = 40, double lr = 0.5) {
  std::vector<std::string> train_ids, test_ids;
  for (const auto& id : bundle.train_ids())
    if (bundle.by_id(id).kp_label) train_ids.push_back(id);
  for (const auto& id : bundle.test_ids())
    if (bundle.by_id(id).kp_label) test_ids.push_back(id);
  if (train_ids.empty() || test_ids.empty())
    throw ArgumentError("eval_kp: knowledge-point labels missing");

  int n_classes = 0;
  for (const auto& q : bundle.questions)
    if (q.kp_label) n_classes = std::max(n_classes, *q.kp_label + 1);

  Mat train_emb = embed_corpus(ck, net, bundle, vocab, train_ids);
  Mat test_emb = embed_corpus(ck, net, bundle, vocab, test_ids);

  const int d = net.config().d_model;
  auto rng = derived_rng(ck.seed, "kp-probe", 0);
  nn::Parameters probe;
  nn::add_linear(probe, "cls", d, n_classes, rng);
  nn::Sgd opt({lr, 0.9, 1e-4});
  std::vector<int> order(train_ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);

  for (int e = 0; e < epochs; ++e) {
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[std::size_t(uniform_int(rng, 0, std::int64_t(i)))]);
    for (std::size_t at = 0; at < order.size(); at += std::size_t(batch_size)) {
      const std::size_t hi = std::min(order.size(), at + std::size_t(batch_size));
      Mat x(Eigen::Index(hi - at), d);
      std::vector<int> y;
      for (std::size_t i = at; i < hi; ++i) {
        x.row(Eigen::Index(i - at)) = train_emb.row(order[i]);
        y.push_back(*bundle.by_id(train_ids[std::size_t(order[i])]).kp_label);
      }
      ad::Tape tape;
      ad::Var logits = nn::linear(ad::Var(std::move(x)), probe, "cls");
      std::vector<double> w(y.size(), 1.0);
      ad::Var loss = ad::ce_rows(logits, y, w);
      nn::zero_grads(probe);
      tape.backward(loss);
      opt.step(probe);
    }
  }

  // predictions on the test split
  Mat logits = (test_emb * nn::param(probe, "cls.w").value()).rowwise() +
               nn::param(probe, "cls.b").value().row(0);
  std::vector<int> pred(test_ids.size()), truth(test_ids.size());
  for (std::size_t i = 0; i < test_ids.size(); ++i) {
    Eigen::Index arg;
    logits.row(Eigen::Index(i)).maxCoeff(&arg);
    pred[i] = int(arg);
    truth[i] = *bundle.by_id(test_ids[i]).kp_label;
  }

  std::vector<int> tp, fp, fn;
  tp.resize(std::size_t(n_classes));
  fp.resize(std::size_t(n_classes));
  fn.resize(std::size_t(n_classes));
  int correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == truth[i]) {
      ++tp[std::size_t(truth[i])];
      ++correct;
    } else {
      ++fp[std::size_t(pred[i])];
      ++fn[std::size_t(truth[i])];
    }
  }
  // single-label micro-F1 equals accuracy
  const double micro = double(correct) / double(pred.size());
  double macro = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    const int t = tp[std::size_t(c)], p = fp[std::size_t(c)], n = fn[std::size_t(c)];
    if (t + p + n == 0) continue;
    ++present;
    macro += (2.0 * t) / std::max(1, 2 * t + p + n);
  }
  macro /= std::max(1, present);

  EvalReport rep;
  rep.task = "kp";
  rep.subset = "";
  rep.metrics["f1_micro"] = micro;
  rep.metrics["f1_macro"] = macro;
  rep.n_queries = int(test_ids.size());
  rep.checkpoint_id = ck.id();
  rep.seed = ck.seed;
  return rep;
}

}  // namespace tqnet::evaluate
