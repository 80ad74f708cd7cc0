#pragma once

#include "tqnet/corpus.hpp"

namespace tqnet::augment {

using corpus::EncodedQuestion;

struct AugmentConfig {
  double mask_prob = 0.15;
  double window_lo = 0.7;  // kept-window fraction range
  double window_hi = 1.0;
  double crop_scale_lo = 0.5;  // random-resized-crop area range
  double crop_scale_hi = 1.0;
  double flip_prob = 0.5;
  double jitter_strength = 0.2;
  double blur_prob = 0.3;

  void validate() const {
    if (window_lo > window_hi || window_lo <= 0.0 || window_hi > 1.0)
      throw ArgumentError("augment: window range must satisfy 0 < lo <= hi <= 1");
    for (double p : {mask_prob, flip_prob, blur_prob})
      if (p < 0.0 || p > 1.0) throw ArgumentError("augment: probability outside [0,1]");
  }
};

// keep a contiguous window of ceil(f*L) tokens, f ~ U(lo,hi), then mask
// kept non-reserved tokens independently with mask_prob
inline std::vector<int> augment_text(const std::vector<int>& tokens,
                                     const AugmentConfig& cfg, std::mt19937_64& rng) {
  if (tokens.empty()) throw ArgumentError("augment_text: empty token sequence");
  cfg.validate();
  const int L = int(tokens.size());
  const double f = uniform(rng, cfg.window_lo, cfg.window_hi);
  const int keep = std::min(L, std::max(1, int(std::ceil(f * L))));
  const int start = int(uniform_int(rng, 0, L - keep));
  std::vector<int> out(tokens.begin() + start, tokens.begin() + start + keep);
  for (int& id : out)
    if (id >= corpus::kNumReserved && uniform(rng) < cfg.mask_prob) id = corpus::kMaskId;
  return out;
}

inline img::Image augment_image(const img::Image& in, const AugmentConfig& cfg,
                                std::mt19937_64& rng, int out_size = 32) {
  cfg.validate();
  if (!in.data.allFinite()) throw DataError("augment_image: non-finite pixel values");

  // random resized crop
  const double scale = uniform(rng, cfg.crop_scale_lo, cfg.crop_scale_hi);
  const int ch = std::max(1, int(std::round(in.h * std::sqrt(scale))));
  const int cw = std::max(1, int(std::round(in.w * std::sqrt(scale))));
  const int y0 = int(uniform_int(rng, 0, in.h - ch));
  const int x0 = int(uniform_int(rng, 0, in.w - cw));
  img::Image out = img::resize(img::crop(in, y0, x0, ch, cw), out_size, out_size);

  if (uniform(rng) < cfg.flip_prob) {
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w / 2; ++x)
        for (int c = 0; c < out.channels(); ++c)
          std::swap(out.data(c, y * out.w + x), out.data(c, y * out.w + (out.w - 1 - x)));
  }

  // multiplicative per-channel jitter plus brightness offset
  if (cfg.jitter_strength > 0.0) {
    const double bright = uniform(rng, -cfg.jitter_strength, cfg.jitter_strength) * 0.5;
    for (int c = 0; c < out.channels(); ++c) {
      const double g = 1.0 + uniform(rng, -cfg.jitter_strength, cfg.jitter_strength);
      out.data.row(c) = out.data.row(c).array() * g + bright;
    }
  }

  if (uniform(rng) < cfg.blur_prob) {
    img::Image blurred = out;
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x)
        for (int c = 0; c < out.channels(); ++c) {
          double acc = 0.0;
          int n = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy < 0 || yy >= out.h || xx < 0 || xx >= out.w) continue;
              acc += out.data(c, yy * out.w + xx);
              ++n;
            }
          blurred.data(c, y * out.w + x) = acc / n;
        }
    out = std::move(blurred);
  }

  out.data = out.data.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

// One augmented view of a whole question: the instance (text + every image)
// is the augmentation unit; image count is preserved.
inline EncodedQuestion make_view(const EncodedQuestion& q, const AugmentConfig& cfg,
                                 std::mt19937_64& rng, int max_len) {
  EncodedQuestion v;
  v.id = q.id;
  std::vector<int> real(q.token_ids.begin(), q.token_ids.begin() + q.n_real_tokens);
  std::vector<int> aug = augment_text(real, cfg, rng);
  v.n_real_tokens = int(aug.size());
  v.token_ids.assign(std::size_t(max_len), corpus::kPadId);
  v.mask.assign(std::size_t(max_len), 0.0);
  for (int i = 0; i < v.n_real_tokens; ++i) {
    v.token_ids[std::size_t(i)] = aug[std::size_t(i)];
    v.mask[std::size_t(i)] = 1.0;
  }
  for (const auto& im : q.images) v.images.push_back(augment_image(im, cfg, rng, im.h));
  return v;
}

// two correlated views from independent augmentation draws; round keeps the
// per-sample stream fresh across training steps while staying reproducible
inline std::pair<EncodedQuestion, EncodedQuestion> two_views(
    const EncodedQuestion& q, const AugmentConfig& cfg, std::uint64_t global_seed,
    int max_len, std::uint64_t round = 0) {
  auto rng_a = derived_rng(global_seed, q.id, 2 * round);
  auto rng_b = derived_rng(global_seed, q.id, 2 * round + 1);
  return {make_view(q, cfg, rng_a, max_len), make_view(q, cfg, rng_b, max_len)};
}

}  // namespace tqnet::augment
