#pragma once

#include "tqnet/checkpoint.hpp"
#include "tqnet/pretrain.hpp"

namespace tqnet::finetune {

using ad::Mat;
using ad::Var;
using nn::Parameters;

// B x B binary similarity labels: symmetric, zero diagonal
inline Mat build_label_matrix(const std::vector<std::string>& ids,
                              const corpus::SimilarityGroundTruth& gt) {
  const Eigen::Index B = Eigen::Index(ids.size());
  std::set<std::string> uniq(ids.begin(), ids.end());
  if (Eigen::Index(uniq.size()) != B)
    throw ArgumentError("build_label_matrix: duplicate id in batch");
  Mat m = Mat::Zero(B, B);
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& sims = gt.similars(ids[std::size_t(i)]);
    for (Eigen::Index j = 0; j < B; ++j)
      if (i != j && sims.count(ids[std::size_t(j)])) m(i, j) = 1.0;
  }
  return m;
}

// Supervised contrastive loss: mean over ordered positive pairs (seed, sim) of
// -log( e^{q_seed.q_sim/tau} / (e^{q_seed.q_sim/tau} + sum_{o in N_seed} e^{q_seed.q_o/tau}) )
// where N_seed excludes the seed itself and every labeled positive of the seed.
inline Var scl_loss(const Var& embeddings, const Mat& labels, double tau) {
  if (tau <= 0.0) throw ArgumentError("scl_loss: tau must be positive");
  const Eigen::Index B = embeddings.rows();
  if (labels.rows() != B || labels.cols() != B)
    throw ArgumentError("scl_loss: label matrix shape mismatch");
  if ((labels.diagonal().array() != 0.0).any())
    throw ArgumentError("scl_loss: nonzero diagonal");
  if (!labels.isApprox(labels.transpose()))
    throw ArgumentError("scl_loss: label matrix must be symmetric");
  if (labels.sum() == 0.0)
    throw ArgumentError("scl_loss: no positive pairs in batch, resample");

  Var scores = ad::scale(ad::matmul(embeddings, ad::transpose(embeddings)), 1.0 / tau);

  // custom reduction over the score matrix with an analytic backward
  auto sn = scores.node();
  const Mat& S = sn->value;
  double loss = 0.0;
  int n_terms = 0;
  for (Eigen::Index i = 0; i < B; ++i)
    for (Eigen::Index j = 0; j < B; ++j) {
      if (labels(i, j) != 1.0) continue;
      double mx = S(i, j);
      for (Eigen::Index o = 0; o < B; ++o)
        if (o != i && labels(i, o) == 0.0) mx = std::max(mx, S(i, o));
      double z = std::exp(S(i, j) - mx);
      for (Eigen::Index o = 0; o < B; ++o)
        if (o != i && labels(i, o) == 0.0) z += std::exp(S(i, o) - mx);
      loss += std::log(z) + mx - S(i, j);
      ++n_terms;
    }
  Mat v(1, 1);
  v(0, 0) = loss / n_terms;
  Var out = ad::detail::make_op(std::move(v), scores.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    Mat L = labels;
    on->backprop = [sn, on, L, n_terms]() {
      const Mat& S = sn->value;
      const Eigen::Index B = S.rows();
      Mat g = Mat::Zero(B, B);
      for (Eigen::Index i = 0; i < B; ++i)
        for (Eigen::Index j = 0; j < B; ++j) {
          if (L(i, j) != 1.0) continue;
          double mx = S(i, j);
          for (Eigen::Index o = 0; o < B; ++o)
            if (o != i && L(i, o) == 0.0) mx = std::max(mx, S(i, o));
          const double epos = std::exp(S(i, j) - mx);
          double z = epos;
          for (Eigen::Index o = 0; o < B; ++o)
            if (o != i && L(i, o) == 0.0) z += std::exp(S(i, o) - mx);
          g(i, j) += epos / z - 1.0;
          for (Eigen::Index o = 0; o < B; ++o)
            if (o != i && L(i, o) == 0.0) g(i, o) += std::exp(S(i, o) - mx) / z;
        }
      sn->accumulate(g * (on->grad(0, 0) / n_terms));
    };
  }
  return out;
}

// symmetric pair head on [u+v, |u-v|, u*v]; sigmoid similarity probability
inline void add_pair_head(Parameters& p, int d, std::mt19937_64& rng) {
  const int hidden = std::max(8, d / 2);
  nn::add_linear(p, "pair.fc1", 3 * d, hidden, rng);
  nn::add_linear(p, "pair.fc2", hidden, 1, rng);
}

inline Var pair_logit_raw(const Parameters& p, const Var& u, const Var& v) {
  Var feats = ad::concat_cols({ad::add(u, v), ad::abs(ad::sub(u, v)), ad::mul(u, v)});
  return nn::linear(ad::gelu(nn::linear(feats, p, "pair.fc1")), p, "pair.fc2");
}

inline Var pair_logit(const Parameters& p, const Var& u, const Var& v) {
  return ad::sigmoid(pair_logit_raw(p, u, v));
}

enum class Method { PAIR, SCL };

inline Method method_from(const std::string& s) {
  if (s == "pair") return Method::PAIR;
  if (s == "scl") return Method::SCL;
  throw ArgumentError("unknown finetune method: " + s);
}
inline std::string method_name(Method m) { return m == Method::PAIR ? "pair" : "scl"; }

struct FinetuneConfig {
  Method method = Method::SCL;
  double tau = 0.2;
  int batch_size = 32;
  double lr = 3e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int epochs = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (tau <= 0.0) throw ArgumentError("finetune: tau must be positive");
    if (batch_size < 2 || epochs < 1) throw ArgumentError("finetune: bad batch/epochs");
  }
};

struct FinetuneResult {
  checkpoint::Checkpoint ckpt;
  std::vector<double> epoch_losses;
};

namespace detail {

// group-aware batch: half drawn as labeled similar pairs, half random,
// no duplicate ids, always >= 1 positive pair
inline std::vector<std::string> scl_batch(const std::vector<corpus::PairLabel>& positives,
                                          const std::vector<std::string>& all_ids,
                                          int batch_size, std::mt19937_64& rng) {
  std::vector<std::string> ids;
  std::set<std::string> used;
  auto try_add = [&](const std::string& id) {
    if (int(ids.size()) >= batch_size || used.count(id)) return false;
    used.insert(id);
    ids.push_back(id);
    return true;
  };
  const int n_pair_slots = batch_size / 2 / 2;  // half the batch as pairs
  int guard = 0;
  while (int(ids.size()) < n_pair_slots * 2 && guard++ < batch_size * 50) {
    const auto& p = positives[std::size_t(uniform_int(rng, 0, int(positives.size()) - 1))];
    if (used.count(p.a) || used.count(p.b)) continue;
    try_add(p.a);
    try_add(p.b);
  }
  guard = 0;
  while (int(ids.size()) < batch_size && guard++ < batch_size * 100)
    try_add(all_ids[std::size_t(uniform_int(rng, 0, int(all_ids.size()) - 1))]);
  return ids;
}

}  // namespace detail

// Step 3: supervised fine-tuning from a pretrained (or fresh) checkpoint.
inline FinetuneResult finetune(const checkpoint::Checkpoint& start,
                               const corpus::CorpusBundle& bundle,
                               const corpus::TokenVocab& vocab, const model::TQNet& net,
                               const FinetuneConfig& cfg) {
  cfg.validate();
  auto gt = bundle.gt_train();
  std::vector<corpus::PairLabel> positives;
  for (const auto& p : bundle.pairs_train)
    if (p.label == 1) positives.push_back(p);
  if (positives.empty()) throw ArgumentError("finetune: no positive training pairs");

  FinetuneResult res;
  res.ckpt = start;
  res.ckpt.params = nn::clone_params(start.params);
  res.ckpt.stage = "finetune";
  res.ckpt.method = method_name(cfg.method);
  res.ckpt.parent = start.id();
  res.ckpt.stage_chain.push_back("finetune-" + method_name(cfg.method));
  Parameters& params = res.ckpt.params;
  if (cfg.method == Method::PAIR && params.find("pair.fc1.w") == params.end()) {
    auto rng = derived_rng(cfg.seed, "pair-head", 0);
    add_pair_head(params, net.config().d_model, rng);
  }

  const auto fusion = model::fusion_from(res.ckpt.fusion);
  const auto modality = res.ckpt.modality == "text_only" ? model::Modality::text_only
                                                         : model::Modality::full;

  // train-split questions only
  std::vector<std::string> train_ids = bundle.train_ids();
  std::map<std::string, corpus::EncodedQuestion> enc;
  auto encoded = [&](const std::string& id) -> const corpus::EncodedQuestion& {
    auto it = enc.find(id);
    if (it == enc.end())
      it = enc.emplace(id, corpus::encode_question(bundle.by_id(id), vocab,
                                                   net.config().max_len, bundle.root,
                                                   net.config().image_size))
               .first;
    return it->second;
  };

  nn::Sgd opt({cfg.lr, cfg.momentum, cfg.weight_decay});
  auto rng = derived_rng(cfg.seed, "finetune", 0);
  const int steps_per_epoch = std::max(1, int(train_ids.size()) / cfg.batch_size);

  for (int e = 0; e < cfg.epochs; ++e) {
    double epoch_loss = 0.0;
    int n = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      if (cfg.method == Method::SCL) {
        auto ids = detail::scl_batch(positives, train_ids, cfg.batch_size, rng);
        Mat labels = build_label_matrix(ids, gt.map);
        if (labels.sum() == 0.0) continue;
        model::Batch batch;
        for (const auto& id : ids) batch.push_back(encoded(id));
        ad::Tape tape;
        Var emb = net.embed_batch(params, batch, fusion, modality);
        Var loss = scl_loss(emb, labels, cfg.tau);
        nn::zero_grads(params);
        tape.backward(loss);
        opt.step(params);
        epoch_loss += loss.scalar();
        ++n;
      } else {
        // pair batch: labeled positives, recorded negatives and random
        // in-batch negatives at a 1:1 ratio overall
        const int P = cfg.batch_size / 2;
        std::vector<std::pair<corpus::PairLabel, double>> items;
        for (int i = 0; i < P; ++i) {
          const auto& p =
              positives[std::size_t(uniform_int(rng, 0, int(positives.size()) - 1))];
          items.push_back({p, 1.0});
        }
        for (int i = 0; i < P; ++i) {
          if (!gt.negatives.empty() && uniform(rng) < 0.5) {
            const auto& p = gt.negatives[std::size_t(
                uniform_int(rng, 0, int(gt.negatives.size()) - 1))];
            items.push_back({p, 0.0});
          } else {
            const auto& a = train_ids[std::size_t(uniform_int(rng, 0, int(train_ids.size()) - 1))];
            const auto& b = train_ids[std::size_t(uniform_int(rng, 0, int(train_ids.size()) - 1))];
            if (a == b || gt.map.similars(a).count(b)) {
              --i;
              continue;
            }
            items.push_back({{a, b, 0}, 0.0});
          }
        }
        model::Batch batch;
        for (const auto& [p, y] : items) {
          batch.push_back(encoded(p.a));
          batch.push_back(encoded(p.b));
        }
        ad::Tape tape;
        Var emb = net.embed_batch(params, batch, fusion, modality);
        std::vector<Var> us, vs;
        for (std::size_t i = 0; i < items.size(); ++i) {
          us.push_back(ad::slice_rows(emb, Eigen::Index(2 * i), 1));
          vs.push_back(ad::slice_rows(emb, Eigen::Index(2 * i + 1), 1));
        }
        Var z = pair_logit_raw(params, ad::concat_rows(us), ad::concat_rows(vs));
        // BCE through a 2-way softmax on [0, z]
        Var two = ad::concat_cols({Var(Mat::Zero(z.rows(), 1)), z});
        std::vector<int> targets;
        std::vector<double> weights(items.size(), 1.0);
        for (const auto& [p, y] : items) targets.push_back(y > 0.5 ? 1 : 0);
        Var loss = ad::ce_rows(two, targets, weights);
        nn::zero_grads(params);
        tape.backward(loss);
        opt.step(params);
        epoch_loss += loss.scalar();
        ++n;
      }
    }
    res.epoch_losses.push_back(n ? epoch_loss / n : 0.0);
  }
  return res;
}

}  // namespace tqnet::finetune
