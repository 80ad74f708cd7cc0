#pragma once

#include <iostream>

#include "tqnet/augment.hpp"
#include "tqnet/checkpoint.hpp"
#include "tqnet/model.hpp"

namespace tqnet::pretrain {

using ad::Mat;
using ad::Var;
using nn::Parameters;

// fixed-capacity FIFO ring of unit-norm key embeddings
class NegativeQueue {
 public:
  NegativeQueue(int capacity, int dim)
      : capacity_(capacity), data_(Mat::Zero(capacity, dim)) {
    if (capacity < 1 || dim < 1) throw ArgumentError("queue: capacity and dim must be >= 1");
  }

  void enqueue(const Mat& keys) {
    if (keys.rows() > capacity_) throw ArgumentError("enqueue: batch larger than capacity");
    if (keys.cols() != data_.cols()) throw ArgumentError("enqueue: dimension mismatch");
    for (Eigen::Index i = 0; i < keys.rows(); ++i) {
      if (std::abs(keys.row(i).norm() - 1.0) > 1e-6)
        throw ArgumentError("enqueue: keys must be unit-norm");
      data_.row(ptr_) = keys.row(i);
      ptr_ = (ptr_ + 1) % capacity_;
      size_ = std::min(size_ + 1, std::size_t(capacity_));
    }
  }

  void fill_random(std::mt19937_64& rng) {
    for (Eigen::Index i = 0; i < capacity_; ++i) {
      for (Eigen::Index j = 0; j < data_.cols(); ++j) data_(i, j) = normal(rng);
      data_.row(i).normalize();
    }
    size_ = std::size_t(capacity_);
    ptr_ = 0;
  }

  // oldest-to-newest is immaterial for the loss; rows 0..size-1 are valid
  Mat contents() const { return data_.topRows(Eigen::Index(size_)); }
  std::size_t size() const { return size_; }
  int capacity() const { return capacity_; }

 private:
  Eigen::Index capacity_;
  Mat data_;
  Eigen::Index ptr_ = 0;
  std::size_t size_ = 0;
};

struct MomentumState {
  Parameters p_query;
  Parameters p_key;
  double m = 0.999;
};

// p_key <- m*p_key + (1-m)*p_query, every tensor; query untouched
inline void momentum_update(MomentumState& s) {
  if (s.p_key.size() != s.p_query.size())
    throw IntegrityError("momentum_update: parameter sets differ");
  auto qi = s.p_query.begin();
  for (auto& [name, key] : s.p_key) {
    if (qi->first != name || qi->second.rows() != key.rows() ||
        qi->second.cols() != key.cols())
      throw IntegrityError("momentum_update: shape mismatch at " + name);
    key.value() = s.m * key.value() + (1.0 - s.m) * qi->second.value();
    ++qi;
  }
}

// Eq of the temperature-scaled contrastive loss: mean over batch rows of
// -log( e^{q.k+ / tau} / (e^{q.k+ / tau} + sum_neg e^{q.k- / tau}) ).
// Gradients flow to q only; k_pos and the queue are detached by construction.
inline Var info_nce(const Var& q, const Mat& k_pos, const Mat& queue, double tau) {
  if (tau <= 0.0) throw ArgumentError("info_nce: tau must be positive");
  if (queue.rows() == 0) throw ArgumentError("info_nce: empty queue");
  if (q.rows() != k_pos.rows() || q.cols() != k_pos.cols() || q.cols() != queue.cols())
    throw ArgumentError("info_nce: shape mismatch");
  Var pos = ad::matmul(ad::mul(q, Var(k_pos)), Var(Mat::Ones(q.cols(), 1)));  // B x 1
  Var neg = ad::matmul(q, Var(Mat(queue.transpose())));                       // B x K
  Var scores = ad::scale(ad::concat_cols({pos, neg}), 1.0 / tau);
  std::vector<int> targets(static_cast<std::size_t>(q.rows()), 0);
  std::vector<double> weights(static_cast<std::size_t>(q.rows()), 1.0);
  return ad::ce_rows(scores, targets, weights);
}

// in-batch emulation of shuffling keys across devices before batch-dependent
// normalization; returns (permutation, inverse)
inline std::pair<std::vector<int>, std::vector<int>> shuffle_keys(int batch_size,
                                                                  int n_virtual_devices,
                                                                  std::mt19937_64& rng) {
  if (n_virtual_devices < 1 || batch_size % n_virtual_devices != 0)
    throw ArgumentError("shuffle_keys: batch size must divide by n_virtual_devices");
  std::vector<int> perm;
  perm.resize(std::size_t(batch_size));
  for (int i = 0; i < batch_size; ++i) perm[std::size_t(i)] = i;
  if (n_virtual_devices > 1)
    for (int i = batch_size - 1; i > 0; --i)
      std::swap(perm[std::size_t(i)], perm[std::size_t(uniform_int(rng, 0, i))]);
  std::vector<int> inv;
  inv.resize(std::size_t(batch_size));
  for (int i = 0; i < batch_size; ++i) inv[std::size_t(perm[std::size_t(i)])] = i;
  return {perm, inv};
}

enum class Strategy { MLM, CL, MCL };
enum class Scope { UNI, SEQ, CROSS };

inline Strategy strategy_from(const std::string& s) {
  if (s == "mlm") return Strategy::MLM;
  if (s == "cl") return Strategy::CL;
  if (s == "mcl") return Strategy::MCL;
  throw ArgumentError("unknown strategy: " + s);
}
inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::MLM: return "mlm";
    case Strategy::CL: return "cl";
    case Strategy::MCL: return "mcl";
  }
  throw ArgumentError("bad strategy");
}
inline Scope scope_from(const std::string& s) {
  if (s == "uni") return Scope::UNI;
  if (s == "seq") return Scope::SEQ;
  if (s == "cross") return Scope::CROSS;
  throw ArgumentError("unknown scope: " + s);
}
inline std::string scope_name(Scope s) {
  switch (s) {
    case Scope::UNI: return "uni";
    case Scope::SEQ: return "seq";
    case Scope::CROSS: return "cross";
  }
  throw ArgumentError("bad scope");
}

struct PretrainConfig {
  Strategy strategy = Strategy::MCL;
  Scope scope = Scope::UNI;
  model::Fusion fusion = model::Fusion::coordinated;
  double tau = 0.2;
  double m = 0.999;
  int queue_size = 4096;
  int batch_size = 32;
  int steps = 500;       // per stage
  int mlm_steps = 0;     // 0 = same as steps (MCL stage-1 override)
  double lr = 0.0;       // 0 = MoCo-family default 3e-2 * batch/256
  double mlm_lr = 0.0;   // 0 = same as lr (MCL stage-1 override)
  std::uint64_t seed = 0;
  int n_virtual_devices = 4;
  double mask_prob = 0.15;
  augment::AugmentConfig augment;

  void validate() const {
    if (tau <= 0.0) throw ArgumentError("pretrain: tau must be positive");
    if (m < 0.0 || m >= 1.0) throw ArgumentError("pretrain: m must be in [0,1)");
    if (queue_size < batch_size) throw ArgumentError("pretrain: queue_size must be >= batch");
    augment.validate();
  }

  double effective_lr() const { return lr > 0.0 ? lr : 3e-2 * batch_size / 256.0; }
};

// masked-token cross-entropy over masked positions only; returns empty when
// the batch has nothing to mask
inline std::optional<double> mlm_step(const model::TQNet& net, Parameters& params,
                                      const model::Batch& batch, double mask_prob,
                                      std::mt19937_64& rng, nn::Sgd& opt) {
  model::Batch masked = batch;
  std::vector<int> targets;
  std::vector<double> weights;
  bool any = false;
  for (auto& q : masked)
    for (std::size_t i = 0; i < q.token_ids.size(); ++i) {
      int& id = q.token_ids[i];
      const bool maskable = q.mask[i] != 0.0 && id >= corpus::kNumReserved;
      if (maskable && uniform(rng) < mask_prob) {
        targets.push_back(id);
        weights.push_back(1.0);
        id = corpus::kMaskId;
        any = true;
      } else {
        targets.push_back(0);
        weights.push_back(0.0);
      }
    }
  if (!any) return std::nullopt;

  ad::Tape tape;
  Var feats = net.text_features(params, masked);
  Var logits = net.mlm_logits(params, feats);
  Var loss = ad::ce_rows(logits, targets, weights);
  nn::zero_grads(params);
  tape.backward(loss);
  opt.step(params);
  return loss.scalar();
}

namespace detail {

// batch-dependent norm groups: images of items on the same virtual device
inline std::vector<std::vector<int>> norm_groups_for(const model::Batch& batch,
                                                     int n_virtual_devices,
                                                     model::NormStyle style) {
  std::vector<std::vector<int>> groups;
  if (style == model::NormStyle::batch_independent) {
    int n = 0;
    for (const auto& q : batch) n += int(q.images.size());
    for (int i = 0; i < n; ++i) groups.push_back({i});
    return groups;
  }
  const int per_dev = int(batch.size()) / n_virtual_devices;
  groups.resize(std::size_t(n_virtual_devices));
  int img = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const int dev = std::min(int(b) / per_dev, n_virtual_devices - 1);
    for (std::size_t k = 0; k < batch[b].images.size(); ++k)
      groups[std::size_t(dev)].push_back(img++);
  }
  std::erase_if(groups, [](const auto& g) { return g.empty(); });
  return groups;
}

inline Mat embed_nograd(const model::TQNet& net, const Parameters& p,
                        const model::Batch& batch, const PretrainConfig& cfg,
                        Scope scope_side_key) {
  // no tape active -> pure inference
  switch (scope_side_key) {
    case Scope::UNI: {
      auto groups = norm_groups_for(batch, cfg.n_virtual_devices, net.config().norm_style);
      return net.embed_batch(p, batch, cfg.fusion, model::Modality::full, groups).value();
    }
    case Scope::SEQ:
      throw IntegrityError("SEQ handled per stream");
    case Scope::CROSS: {
      auto groups = norm_groups_for(batch, cfg.n_virtual_devices, net.config().norm_style);
      return net.embed_image_stream(p, batch, groups).value();
    }
  }
  throw ArgumentError("bad scope");
}

}  // namespace detail

// One contrastive step: two views -> query forward -> detached key forward
// (shuffled when normalization is batch-dependent) -> loss against the queue
// -> query update -> momentum update -> enqueue keys.
inline std::optional<double> cl_step(const model::TQNet& net, MomentumState& state,
                                     NegativeQueue& queue, const model::Batch& raw_batch,
                                     const PretrainConfig& cfg, std::uint64_t step,
                                     nn::Sgd& opt,
                                     model::Modality stream = model::Modality::full) {
  model::Batch batch = raw_batch;
  if (cfg.scope == Scope::CROSS) {
    std::erase_if(batch, [](const auto& q) { return q.images.empty(); });
    if (batch.empty()) {
      std::cerr << "cl_step: cross-modal batch had no images, skipped\n";
      return std::nullopt;
    }
  }

  // two views per instance
  model::Batch view_a, view_b;
  for (const auto& q : batch) {
    auto [a, b] = augment::two_views(q, cfg.augment, cfg.seed, net.config().max_len, step);
    view_a.push_back(std::move(a));
    view_b.push_back(std::move(b));
  }

  // key forward, detached, optionally shuffled for batch-dependent norms
  Mat keys;
  {
    model::Batch kb = view_b;
    std::vector<int> inv;
    if (net.config().norm_style == model::NormStyle::batch_dependent &&
        int(kb.size()) % cfg.n_virtual_devices == 0) {
      auto rng = derived_rng(cfg.seed, "shuffle", step);
      auto [perm, inverse] = shuffle_keys(int(kb.size()), cfg.n_virtual_devices, rng);
      model::Batch shuffled;
      for (int i : perm) shuffled.push_back(kb[std::size_t(i)]);
      kb = std::move(shuffled);
      inv = std::move(inverse);
    }
    Mat out;
    switch (cfg.scope) {
      case Scope::UNI:
        out = detail::embed_nograd(net, state.p_key, kb, cfg, Scope::UNI);
        break;
      case Scope::SEQ:
        out = stream == model::Modality::text_only
                  ? net.embed_text_stream(state.p_key, kb).value()
                  : net.embed_image_stream(
                            state.p_key, kb,
                            detail::norm_groups_for(kb, cfg.n_virtual_devices,
                                                    net.config().norm_style))
                        .value();
        break;
      case Scope::CROSS:
        out = detail::embed_nograd(net, state.p_key, kb, cfg, Scope::CROSS);
        break;
    }
    if (!inv.empty()) {
      keys.resize(out.rows(), out.cols());
      for (Eigen::Index i = 0; i < out.rows(); ++i) keys.row(inv[std::size_t(i)]) = out.row(i);
    } else {
      keys = std::move(out);
    }
  }

  // query forward with gradients
  ad::Tape tape;
  Var q;
  switch (cfg.scope) {
    case Scope::UNI: {
      auto groups =
          detail::norm_groups_for(view_a, cfg.n_virtual_devices, net.config().norm_style);
      q = net.embed_batch(state.p_query, view_a, cfg.fusion, model::Modality::full, groups);
      break;
    }
    case Scope::SEQ:
      q = stream == model::Modality::text_only
              ? net.embed_text_stream(state.p_query, view_a)
              : net.embed_image_stream(
                    state.p_query, view_a,
                    detail::norm_groups_for(view_a, cfg.n_virtual_devices,
                                            net.config().norm_style));
      break;
    case Scope::CROSS:
      q = net.embed_text_stream(state.p_query, view_a);
      break;
  }

  Var loss = info_nce(q, keys, queue.contents(), cfg.tau);
  nn::zero_grads(state.p_query);
  tape.backward(loss);
  opt.step(state.p_query);
  momentum_update(state);
  queue.enqueue(keys);  // after the loss: the queue never holds this batch's keys
  return loss.scalar();
}

struct PretrainResult {
  checkpoint::Checkpoint ckpt;
  std::vector<std::pair<int, double>> loss_curve;  // (step, loss), stages concatenated
};

namespace detail {

inline model::Batch sample_batch(const std::vector<corpus::EncodedQuestion>& pool,
                                 int batch_size, std::mt19937_64& rng) {
  model::Batch b;
  for (int i = 0; i < batch_size; ++i)
    b.push_back(pool[std::size_t(uniform_int(rng, 0, int(pool.size()) - 1))]);
  return b;
}

}  // namespace detail

// Three-strategy pretraining driver. MLM -> stage-1 checkpoint; CL -> stage-2
// from scratch; MCL -> MLM followed by CL from the stage-1 parameters.
inline PretrainResult pretrain(const corpus::CorpusBundle& bundle,
                               const corpus::TokenVocab& vocab, const model::TQNet& net,
                               const PretrainConfig& cfg) {
  cfg.validate();
  if (bundle.questions.empty()) throw ArgumentError("pretrain: empty corpus");

  // encode once; images load eagerly
  std::vector<corpus::EncodedQuestion> pool;
  for (const auto& q : bundle.questions)
    pool.push_back(corpus::encode_question(q, vocab, net.config().max_len, bundle.root,
                                           net.config().image_size));
  if (cfg.scope == Scope::CROSS || cfg.scope == Scope::SEQ) {
    bool any_img = false;
    for (const auto& q : pool) any_img = any_img || !q.images.empty();
    if (!any_img && cfg.scope == Scope::CROSS)
      throw ArgumentError("pretrain: cross scope needs a corpus with images");
  }

  PretrainResult res;
  res.ckpt.config = net.config();
  res.ckpt.vocab_hash = vocab.content_hash();
  res.ckpt.seed = cfg.seed;
  res.ckpt.scope = scope_name(cfg.scope);
  res.ckpt.fusion = model::fusion_name(cfg.fusion);

  Parameters params = net.init_params(cfg.seed);
  nn::SgdConfig sgd{cfg.effective_lr(), 0.9, 5e-4};
  int step_base = 0;

  auto run_mlm = [&](Parameters& p) {
    nn::SgdConfig mlm_sgd = sgd;
    if (cfg.mlm_lr > 0.0) mlm_sgd.lr = cfg.mlm_lr;
    nn::Sgd opt(mlm_sgd);
    auto rng = derived_rng(cfg.seed, "mlm", 0);
    const int n = cfg.mlm_steps > 0 ? cfg.mlm_steps : cfg.steps;
    for (int s = 0; s < n; ++s) {
      auto batch = detail::sample_batch(pool, cfg.batch_size, rng);
      if (auto l = mlm_step(net, p, batch, cfg.mask_prob, rng, opt))
        res.loss_curve.emplace_back(step_base + s, *l);
    }
    step_base += n;
  };

  auto run_cl = [&](Parameters& p, model::Modality stream, const std::string& tag) {
    MomentumState st{std::move(p), {}, cfg.m};
    st.p_key = nn::clone_params(st.p_query);  // same architecture and initialization
    NegativeQueue queue(cfg.queue_size, net.config().d_model);
    auto qrng = derived_rng(cfg.seed, "queue-" + tag, 0);
    queue.fill_random(qrng);
    nn::Sgd opt(sgd);
    auto rng = derived_rng(cfg.seed, "cl-" + tag, 0);
    const auto* sample_pool = &pool;
    std::vector<corpus::EncodedQuestion> img_pool;
    if (stream == model::Modality::image_only) {
      for (const auto& q : pool)
        if (!q.images.empty()) img_pool.push_back(q);
      if (img_pool.empty()) throw ArgumentError("pretrain: image stream has no images");
      sample_pool = &img_pool;
    }
    for (int s = 0; s < cfg.steps; ++s) {
      auto batch = detail::sample_batch(*sample_pool, cfg.batch_size, rng);
      if (auto l = cl_step(net, st, queue, batch, cfg, std::uint64_t(s), opt, stream))
        res.loss_curve.emplace_back(step_base + s, *l);
    }
    step_base += cfg.steps;
    p = std::move(st.p_query);
  };

  switch (cfg.strategy) {
    case Strategy::MLM:
      run_mlm(params);
      res.ckpt.stage = "mlm";
      res.ckpt.stage_chain = {"mlm"};
      break;
    case Strategy::CL:
    case Strategy::MCL: {
      if (cfg.strategy == Strategy::MCL) {
        run_mlm(params);
        res.ckpt.stage_chain.push_back("mlm");
      }
      if (cfg.scope == Scope::SEQ) {
        Parameters text_p = nn::clone_params(params);
        Parameters img_p = nn::clone_params(params);
        run_cl(text_p, model::Modality::text_only, "text");
        run_cl(img_p, model::Modality::image_only, "image");
        // assemble: text stream from the text run, visual stream from the
        // image run, fusion and heads keep their fresh initialization
        for (auto& [name, v] : params) {
          if (name.rfind("text.", 0) == 0) v.value() = text_p.at(name).value();
          if (name.rfind("vis.", 0) == 0) v.value() = img_p.at(name).value();
        }
      } else {
        run_cl(params, model::Modality::full, scope_name(cfg.scope));
      }
      res.ckpt.stage = "cl";
      res.ckpt.stage_chain.push_back("cl-" + scope_name(cfg.scope));
      break;
    }
  }

  res.ckpt.params = std::move(params);
  return res;
}

}  // namespace tqnet::pretrain
