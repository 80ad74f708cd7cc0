#include <catch2/catch_amalgamated.hpp>

#include "tqnet/augment.hpp"

using namespace tqnet;

namespace {

std::vector<int> tokens(int n, int base = corpus::kNumReserved) {
  std::vector<int> t;
  for (int i = 0; i < n; ++i) t.push_back(base + i);
  return t;
}

img::Image flat_image(int h, int w, double v) {
  img::Image im;
  im.h = h;
  im.w = w;
  im.data = ad::Mat::Constant(3, h * w, v);
  return im;
}

}  // namespace

TEST_CASE("augment_text: window length bounds hold") {
  augment::AugmentConfig cfg;
  cfg.window_lo = 0.7;
  cfg.window_hi = 1.0;
  cfg.mask_prob = 0.0;
  auto rng = derived_rng(1, "t", 0);
  const auto src = tokens(20);
  for (int trial = 0; trial < 500; ++trial) {
    auto out = augment::augment_text(src, cfg, rng);
    CHECK(int(out.size()) >= 14);  // ceil(0.7*20)
    CHECK(int(out.size()) <= 20);
    // contiguous window: preserved order, all from src
    for (std::size_t i = 1; i < out.size(); ++i) CHECK(out[i] == out[i - 1] + 1);
  }
}

TEST_CASE("augment_text: full mask and no-op extremes") {
  augment::AugmentConfig cfg;
  cfg.window_lo = cfg.window_hi = 1.0;
  cfg.mask_prob = 1.0;
  auto rng = derived_rng(2, "t", 0);
  auto out = augment::augment_text(tokens(12), cfg, rng);
  REQUIRE(out.size() == 12);
  for (int id : out) CHECK(id == corpus::kMaskId);

  cfg.mask_prob = 0.0;
  auto out2 = augment::augment_text(tokens(12), cfg, rng);
  CHECK(out2 == tokens(12));

  CHECK_THROWS_AS(augment::augment_text({}, cfg, rng), ArgumentError);
}

TEST_CASE("augment_text: reserved ids never masked") {
  augment::AugmentConfig cfg;
  cfg.window_lo = cfg.window_hi = 1.0;
  cfg.mask_prob = 1.0;
  auto rng = derived_rng(3, "t", 0);
  std::vector<int> src = {corpus::kPadId, corpus::kUnkId, 5, corpus::kMaskId};
  auto out = augment::augment_text(src, cfg, rng);
  CHECK(out[0] == corpus::kPadId);
  CHECK(out[1] == corpus::kUnkId);
  CHECK(out[2] == corpus::kMaskId);
}

TEST_CASE("augment_text: empirical mask rate near mask_prob") {
  augment::AugmentConfig cfg;
  cfg.window_lo = cfg.window_hi = 1.0;
  cfg.mask_prob = 0.15;
  auto rng = derived_rng(4, "t", 0);
  const auto src = tokens(20);
  int masked = 0, total = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    auto out = augment::augment_text(src, cfg, rng);
    for (int id : out) {
      ++total;
      if (id == corpus::kMaskId) ++masked;
    }
  }
  CHECK(std::abs(double(masked) / total - 0.15) < 0.02);
}

TEST_CASE("augment_image: shape preserved, values clamped, deterministic") {
  augment::AugmentConfig cfg;
  std::mt19937_64 rng_a(99), rng_b(99);
  img::Image im = flat_image(32, 32, 0.4);
  // paint a gradient so crops differ
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) im.data(0, y * 32 + x) = x / 31.0;

  auto a = augment::augment_image(im, cfg, rng_a, 32);
  auto b = augment::augment_image(im, cfg, rng_b, 32);
  CHECK(a.h == 32);
  CHECK(a.w == 32);
  CHECK(a.data == b.data);  // same stream, same view
  CHECK(a.data.minCoeff() >= 0.0);
  CHECK(a.data.maxCoeff() <= 1.0);

  auto c = augment::augment_image(im, cfg, rng_a, 32);
  CHECK_FALSE(a.data == c.data);  // stream advanced, different view
}

TEST_CASE("augment_image: identity configuration is a no-op") {
  augment::AugmentConfig cfg;
  cfg.crop_scale_lo = cfg.crop_scale_hi = 1.0;
  cfg.flip_prob = 0.0;
  cfg.jitter_strength = 0.0;
  cfg.blur_prob = 0.0;
  std::mt19937_64 rng(1);
  img::Image im = flat_image(16, 16, 0.3);
  for (int i = 0; i < 16 * 16; ++i) im.data(1, i) = (i % 17) / 17.0;
  auto out = augment::augment_image(im, cfg, rng, 16);
  CHECK((out.data - im.data).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("two_views: reproducible per (seed, id, round), distinct across views") {
  augment::AugmentConfig cfg;
  corpus::TokenVocab v;
  corpus::Question q{"q7", {}, {}, std::nullopt, corpus::QType::choice};
  for (int i = 0; i < 16; ++i) {
    const std::string tok = "tok" + std::to_string(i);
    v.add(tok);
    q.text.push_back(tok);
  }
  auto e = corpus::encode_question(q, v, 24, ".");
  e.images.push_back(flat_image(32, 32, 0.6));

  auto [a1, b1] = augment::two_views(e, cfg, 123, 24, 0);
  auto [a2, b2] = augment::two_views(e, cfg, 123, 24, 0);
  CHECK(a1.token_ids == a2.token_ids);
  CHECK(b1.token_ids == b2.token_ids);
  CHECK(a1.images[0].data == a2.images[0].data);
  CHECK(b1.images[0].data == b2.images[0].data);
  CHECK(a1.images.size() == e.images.size());

  // view streams are independent; a later round draws fresh views
  auto [a3, b3] = augment::two_views(e, cfg, 123, 24, 1);
  CHECK_FALSE(a1.images[0].data == a3.images[0].data);
  // padded layout is preserved
  REQUIRE(a1.token_ids.size() == 24);
  for (int i = a1.n_real_tokens; i < 24; ++i) {
    CHECK(a1.token_ids[std::size_t(i)] == corpus::kPadId);
    CHECK(a1.mask[std::size_t(i)] == 0.0);
  }
}

TEST_CASE("augment config validation") {
  augment::AugmentConfig cfg;
  cfg.window_lo = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.mask_prob = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.window_lo = 0.9;
  cfg.window_hi = 0.8;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}
