#pragma once

#include "tqnet/corpus.hpp"
#include "tqnet/nn.hpp"

namespace tqnet::model {

using ad::Mat;
using ad::Var;
using nn::Parameters;

enum class Fusion { coordinated, joint };
enum class NormStyle { batch_independent, batch_dependent };
enum class Modality { full, text_only, image_only };

inline std::string fusion_name(Fusion f) {
  return f == Fusion::coordinated ? "coordinated" : "joint";
}
inline Fusion fusion_from(const std::string& s) {
  if (s == "coordinated") return Fusion::coordinated;
  if (s == "joint") return Fusion::joint;
  throw ArgumentError("unknown fusion: " + s);
}
inline std::string norm_style_name(NormStyle n) {
  return n == NormStyle::batch_independent ? "batch_independent" : "batch_dependent";
}
inline NormStyle norm_style_from(const std::string& s) {
  if (s == "batch_independent") return NormStyle::batch_independent;
  if (s == "batch_dependent") return NormStyle::batch_dependent;
  throw ArgumentError("unknown norm_style: " + s);
}

struct ModelConfig {
  int d_model = 128;
  int n_text_layers = 4;
  int n_fusion_layers = 2;
  int n_heads = 4;
  int vocab_size = 0;  // set from the built vocab
  int max_len = 32;
  int max_images = corpus::kMaxImages;
  int image_size = 32;
  std::vector<int> visual_channels = {8, 16, 32, 64};
  NormStyle norm_style = NormStyle::batch_independent;

  void validate() const {
    if (d_model % n_heads != 0) throw ArgumentError("d_model must be divisible by n_heads");
    if (d_model < 1 || n_text_layers < 1 || n_fusion_layers < 1 || n_heads < 1 ||
        vocab_size < corpus::kNumReserved || max_len < 1 || visual_channels.empty())
      throw ArgumentError("model config: all counts must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Batch of encoded questions; all token sequences padded to max_len.
using Batch = std::vector<corpus::EncodedQuestion>;

class TQNet {
 public:
  explicit TQNet(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }

  Parameters init_params(std::uint64_t seed) const {
    std::mt19937_64 rng(splitmix64(seed ^ 0xabcdef12345ULL));
    Parameters p;
    const int d = cfg_.d_model;
    p.emplace("text.tok_emb",
              Var(nn::randn(rng, cfg_.vocab_size, d, 0.02), true));
    p.emplace("text.pos_emb", Var(nn::randn(rng, cfg_.max_len, d, 0.02), true));
    for (int l = 0; l < cfg_.n_text_layers; ++l)
      add_block(p, "text.l" + std::to_string(l), rng);
    nn::add_layernorm(p, "text.ln_f", d);

    int cin = 3;
    for (std::size_t s = 0; s < cfg_.visual_channels.size(); ++s) {
      const int cout = cfg_.visual_channels[s];
      const std::string pre = "vis.s" + std::to_string(s);
      p.emplace(pre + ".conv.w",
                Var(nn::randn(rng, cout, cin * 9, 1.0 / std::sqrt(double(cin * 9))), true));
      p.emplace(pre + ".conv.b", Var(Mat::Zero(cout, 1), true));
      p.emplace(pre + ".norm.g", Var(Mat::Ones(cout, 1), true));
      p.emplace(pre + ".norm.b", Var(Mat::Zero(cout, 1), true));
      cin = cout;
    }
    nn::add_linear(p, "vis.proj", cfg_.visual_channels.back(), d, rng);

    for (int l = 0; l < cfg_.n_fusion_layers; ++l)
      add_block(p, "fuse.l" + std::to_string(l), rng);
    nn::add_layernorm(p, "fuse.ln_f", d);

    nn::add_linear(p, "proj", d, d, rng);
    // small-scale head so a fresh model predicts near-uniformly over the vocab
    p.emplace("mlm.w", Var(nn::randn(rng, d, cfg_.vocab_size, 0.02), true));
    p.emplace("mlm.b", Var(Mat::Zero(1, cfg_.vocab_size), true));
    return p;
  }

  // contextual token features for the whole batch, stacked (B*max_len, d)
  Var text_features(const Parameters& p, const Batch& batch) const {
    const int L = cfg_.max_len;
    std::vector<int> ids;
    ids.reserve(batch.size() * std::size_t(L));
    for (const auto& q : batch) {
      if (int(q.token_ids.size()) != L)
        throw ArgumentError("batch item not padded to max_len");
      for (int id : q.token_ids) {
        if (id < 0 || id >= cfg_.vocab_size) throw ArgumentError("token id out of range");
        ids.push_back(id);
      }
    }
    Var x = ad::gather_rows(nn::param(p, "text.tok_emb"), ids);
    x = ad::add(x, ad::tile_rows(nn::param(p, "text.pos_emb"), Eigen::Index(batch.size())));

    std::vector<Mat> attn_masks = attention_masks(batch, 0);
    for (int l = 0; l < cfg_.n_text_layers; ++l)
      x = block(p, "text.l" + std::to_string(l), x, int(batch.size()), L, attn_masks);
    return nn::layernorm(x, p, "text.ln_f");
  }

  // one visual token per image; norm groups share batch-dependent statistics
  // (each image alone in batch_independent mode)
  std::vector<Var> visual_tokens(const Parameters& p,
                                 const std::vector<const img::Image*>& images,
                                 const std::vector<std::vector<int>>& groups) const {
    std::vector<Var> feats(images.size());
    std::vector<int> H(images.size()), W(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
      const img::Image* im = images[i];
      if (im->channels() != 3) throw DataError("visual encoder expects 3 channels");
      feats[i] = Var(im->data);
      H[i] = im->h;
      W[i] = im->w;
    }
    for (std::size_t s = 0; s < cfg_.visual_channels.size(); ++s) {
      const std::string pre = "vis.s" + std::to_string(s);
      for (std::size_t i = 0; i < feats.size(); ++i) {
        feats[i] = ad::conv2d(feats[i], nn::param(p, pre + ".conv.w"),
                              nn::param(p, pre + ".conv.b"), H[i], W[i], 3, 2, 1);
        H[i] = (H[i] + 1) / 2;
        W[i] = (W[i] + 1) / 2;
      }
      // channel normalization over each norm group, then affine + gelu
      for (const auto& g : groups) {
        if (g.empty()) continue;
        std::vector<Var> parts;
        for (int idx : g) parts.push_back(feats[std::size_t(idx)]);
        Var joined = parts.size() == 1 ? parts[0] : ad::concat_cols(parts);
        joined = ad::col_affine(ad::layernorm_rows(joined), nn::param(p, pre + ".norm.g"),
                                nn::param(p, pre + ".norm.b"));
        joined = ad::gelu(joined);
        Eigen::Index c0 = 0;
        for (int idx : g) {
          const Eigen::Index nc = Eigen::Index(H[std::size_t(idx)]) * W[std::size_t(idx)];
          feats[std::size_t(idx)] =
              parts.size() == 1 ? joined : ad::slice_cols(joined, c0, nc);
          c0 += nc;
        }
      }
    }
    std::vector<Var> tokens(feats.size());
    for (std::size_t i = 0; i < feats.size(); ++i) {
      // global average pool -> 1 x C_last, then project to d_model
      Var gap = ad::scale(ad::matmul(feats[i], Var(Mat::Ones(feats[i].cols(), 1))),
                          1.0 / double(feats[i].cols()));
      tokens[i] = nn::linear(ad::transpose(gap), p, "vis.proj");
    }
    return tokens;
  }

  // full forward: B x d_model unit-norm embeddings
  Var embed_batch(const Parameters& p, const Batch& batch, Fusion fusion = Fusion::coordinated,
                  Modality modality = Modality::full,
                  const std::vector<std::vector<int>>& norm_groups = {}) const {
    if (batch.empty()) throw ArgumentError("embed_batch: empty batch");
    for (const auto& q : batch)
      if (int(q.images.size()) > cfg_.max_images)
        throw ArgumentError("question exceeds max_images");

    const bool use_text = modality != Modality::image_only;
    const bool use_images = modality != Modality::text_only;

    // visual tokens for the whole batch
    std::vector<const img::Image*> images;
    std::vector<int> owner;
    if (use_images)
      for (std::size_t b = 0; b < batch.size(); ++b)
        for (const auto& im : batch[b].images) {
          images.push_back(&im);
          owner.push_back(int(b));
        }
    std::vector<std::vector<int>> groups = norm_groups;
    if (groups.empty())
      for (std::size_t i = 0; i < images.size(); ++i) groups.push_back({int(i)});
    std::vector<Var> vtok =
        images.empty() ? std::vector<Var>{} : visual_tokens(p, images, groups);

    if (!use_text) {
      // image-stream embedding: mean of visual tokens per item
      std::vector<Var> rows;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        std::vector<Var> mine;
        for (std::size_t i = 0; i < images.size(); ++i)
          if (owner[i] == int(b)) mine.push_back(vtok[i]);
        if (mine.empty()) throw ArgumentError("image-only embedding of an image-free question");
        Var stack = mine.size() == 1 ? mine[0] : ad::concat_rows(mine);
        rows.push_back(ad::scale(
            ad::matmul(Var(Mat::Ones(1, stack.rows()) / double(stack.rows())), stack), 1.0));
      }
      Var pooled = ad::concat_rows(rows);
      return ad::l2_normalize_rows(nn::linear(pooled, p, "proj"));
    }

    const int L = cfg_.max_len;
    int max_b = 0;
    std::vector<int> n_img(batch.size(), 0);
    for (std::size_t i = 0; i < images.size(); ++i) ++n_img[std::size_t(owner[i])];
    for (int n : n_img) max_b = std::max(max_b, n);

    if (fusion == Fusion::joint) return embed_joint(p, batch, vtok, owner, max_b);

    Var text = text_features(p, batch);

    // per-sample sequence [visual tokens | text tokens], padded to max_b + L
    const int Lf = max_b + L;
    std::vector<Var> seqs;
    std::vector<Mat> pool_w;  // masked mean-pool weights per sample
    {
      std::size_t img_cursor = 0;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        std::vector<Var> parts;
        for (int j = 0; j < n_img[b]; ++j) parts.push_back(vtok[img_cursor + std::size_t(j)]);
        img_cursor += std::size_t(n_img[b]);
        if (n_img[b] < max_b)
          parts.push_back(Var(Mat::Zero(max_b - n_img[b], cfg_.d_model)));
        parts.push_back(ad::slice_rows(text, Eigen::Index(b) * L, L));
        seqs.push_back(ad::concat_rows(parts));
      }
    }
    Var x = ad::concat_rows(seqs);
    if (!pooled_any(batch, n_img))
      throw ArgumentError("fuse: nothing to pool (all-pad, zero-image input)");

    std::vector<Mat> attn_masks = fusion_masks(batch, n_img, max_b);
    Var shortcut = x;
    for (int l = 0; l < cfg_.n_fusion_layers; ++l)
      x = block(p, "fuse.l" + std::to_string(l), x, int(batch.size()), Lf, attn_masks);
    x = nn::layernorm(x, p, "fuse.ln_f");
    x = ad::add(x, shortcut);  // joint/coordinated information shortcut

    Var pooled = masked_pool(x, batch, n_img, max_b, Lf);
    return ad::l2_normalize_rows(nn::linear(pooled, p, "proj"));
  }

  // text-stream-only embedding (SEQ / CROSS pretraining): text encoder,
  // masked mean-pool, projection, normalize. No fusion blocks.
  Var embed_text_stream(const Parameters& p, const Batch& batch) const {
    Var text = text_features(p, batch);
    std::vector<int> n_img(batch.size(), 0);
    Var pooled = masked_pool(text, batch, n_img, 0, cfg_.max_len);
    return ad::l2_normalize_rows(nn::linear(pooled, p, "proj"));
  }

  Var embed_image_stream(const Parameters& p, const Batch& batch,
                         const std::vector<std::vector<int>>& norm_groups = {}) const {
    return embed_batch(p, batch, Fusion::coordinated, Modality::image_only, norm_groups);
  }

  // per-position vocabulary logits from text features
  Var mlm_logits(const Parameters& p, const Var& text_feats) const {
    return nn::linear(text_feats, p, "mlm");
  }

 private:
  void add_block(Parameters& p, const std::string& pre, std::mt19937_64& rng) const {
    const int d = cfg_.d_model;
    nn::add_layernorm(p, pre + ".ln1", d);
    nn::add_linear(p, pre + ".q", d, d, rng);
    nn::add_linear(p, pre + ".k", d, d, rng);
    nn::add_linear(p, pre + ".v", d, d, rng);
    nn::add_linear(p, pre + ".o", d, d, rng);
    nn::add_layernorm(p, pre + ".ln2", d);
    nn::add_linear(p, pre + ".ff1", d, 4 * d, rng);
    nn::add_linear(p, pre + ".ff2", 4 * d, d, rng);
  }

  // additive key masks, one (L x L) matrix per sample
  std::vector<Mat> attention_masks(const Batch& batch, int prefix) const {
    const int L = cfg_.max_len + prefix;
    std::vector<Mat> out;
    for (const auto& q : batch) {
      Mat m = Mat::Zero(L, L);
      for (int j = 0; j < cfg_.max_len; ++j)
        if (q.mask[std::size_t(j)] == 0.0) m.col(prefix + j).setConstant(-1e9);
      out.push_back(std::move(m));
    }
    return out;
  }

  std::vector<Mat> fusion_masks(const Batch& batch, const std::vector<int>& n_img,
                                int max_b) const {
    const int Lf = max_b + cfg_.max_len;
    std::vector<Mat> out;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Mat m = Mat::Zero(Lf, Lf);
      for (int j = n_img[b]; j < max_b; ++j) m.col(j).setConstant(-1e9);
      for (int j = 0; j < cfg_.max_len; ++j)
        if (batch[b].mask[std::size_t(j)] == 0.0) m.col(max_b + j).setConstant(-1e9);
      out.push_back(std::move(m));
    }
    return out;
  }

  // pre-norm transformer block over a stacked (B*L, d) matrix
  Var block(const Parameters& p, const std::string& pre, const Var& x, int B, int L,
            const std::vector<Mat>& attn_masks) const {
    const int d = cfg_.d_model;
    const int dh = d / cfg_.n_heads;
    Var h = nn::layernorm(x, p, pre + ".ln1");
    Var q = nn::linear(h, p, pre + ".q");
    Var k = nn::linear(h, p, pre + ".k");
    Var v = nn::linear(h, p, pre + ".v");
    std::vector<Var> sample_outs;
    for (int b = 0; b < B; ++b) {
      Var qs = ad::slice_rows(q, Eigen::Index(b) * L, L);
      Var ks = ad::slice_rows(k, Eigen::Index(b) * L, L);
      Var vs = ad::slice_rows(v, Eigen::Index(b) * L, L);
      std::vector<Var> heads;
      for (int hh = 0; hh < cfg_.n_heads; ++hh) {
        Var qh = ad::slice_cols(qs, Eigen::Index(hh) * dh, dh);
        Var kh = ad::slice_cols(ks, Eigen::Index(hh) * dh, dh);
        Var vh = ad::slice_cols(vs, Eigen::Index(hh) * dh, dh);
        Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(double(dh)));
        scores = ad::add_const(scores, attn_masks[std::size_t(b)]);
        heads.push_back(ad::matmul(ad::softmax_rows(scores), vh));
      }
      sample_outs.push_back(ad::concat_cols(heads));
    }
    Var attn = nn::linear(ad::concat_rows(sample_outs), p, pre + ".o");
    Var x1 = ad::add(x, attn);
    Var f = nn::layernorm(x1, p, pre + ".ln2");
    f = nn::linear(ad::gelu(nn::linear(f, p, pre + ".ff1")), p, pre + ".ff2");
    return ad::add(x1, f);
  }

  // joint fusion: visual tokens prefix the text sequence inside the text stack
  Var embed_joint(const Parameters& p, const Batch& batch, const std::vector<Var>& vtok,
                  const std::vector<int>& owner, int max_b) const {
    const int L = cfg_.max_len;
    const int Lj = max_b + L;
    std::vector<int> n_img(batch.size(), 0);
    for (std::size_t i = 0; i < vtok.size(); ++i) ++n_img[std::size_t(owner[i])];

    std::vector<int> ids;
    for (const auto& q : batch)
      for (int id : q.token_ids) ids.push_back(id);
    Var emb = ad::gather_rows(nn::param(p, "text.tok_emb"), ids);
    emb = ad::add(emb, ad::tile_rows(nn::param(p, "text.pos_emb"), Eigen::Index(batch.size())));

    std::vector<Var> seqs;
    {
      std::size_t img_cursor = 0;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        std::vector<Var> parts;
        for (int j = 0; j < n_img[b]; ++j) parts.push_back(vtok[img_cursor + std::size_t(j)]);
        img_cursor += std::size_t(n_img[b]);
        if (n_img[b] < max_b)
          parts.push_back(Var(Mat::Zero(max_b - n_img[b], cfg_.d_model)));
        parts.push_back(ad::slice_rows(emb, Eigen::Index(b) * L, L));
        seqs.push_back(ad::concat_rows(parts));
      }
    }
    Var x = ad::concat_rows(seqs);
    std::vector<Mat> attn_masks = fusion_masks(batch, n_img, max_b);
    for (int l = 0; l < cfg_.n_text_layers; ++l)
      x = block(p, "text.l" + std::to_string(l), x, int(batch.size()), Lj, attn_masks);
    x = nn::layernorm(x, p, "text.ln_f");
    Var pooled = masked_pool(x, batch, n_img, max_b, Lj);
    return ad::l2_normalize_rows(nn::linear(pooled, p, "proj"));
  }

  bool pooled_any(const Batch& batch, const std::vector<int>& n_img) const {
    for (std::size_t b = 0; b < batch.size(); ++b) {
      double s = double(n_img[b]);
      for (double m : batch[b].mask) s += m;
      if (s <= 0.0) return false;
    }
    return true;
  }

  // mean over real positions (visual tokens + unmasked text), per sample
  Var masked_pool(const Var& x, const Batch& batch, const std::vector<int>& n_img, int max_b,
                  int Lseq) const {
    Mat w = Mat::Zero(Eigen::Index(batch.size()), x.rows());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      double total = double(n_img[b]);
      for (double m : batch[b].mask) total += m;
      if (total <= 0.0) throw ArgumentError("masked_pool: nothing to pool");
      const Eigen::Index base = Eigen::Index(b) * Lseq;
      for (int j = 0; j < n_img[b]; ++j) w(Eigen::Index(b), base + j) = 1.0 / total;
      for (int j = 0; j < cfg_.max_len; ++j)
        if (batch[b].mask[std::size_t(j)] != 0.0)
          w(Eigen::Index(b), base + max_b + j) = 1.0 / total;
    }
    return ad::matmul(Var(std::move(w)), x);
  }

  ModelConfig cfg_;
};

}  // namespace tqnet::model
