#include <catch2/catch_amalgamated.hpp>

#include "tqnet/model.hpp"

using namespace tqnet;
using ad::Mat;
using ad::Var;

namespace {

model::ModelConfig small_config(int vocab = 40) {
  model::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_text_layers = 2;
  cfg.n_fusion_layers = 1;
  cfg.n_heads = 2;
  cfg.vocab_size = vocab;
  cfg.max_len = 8;
  cfg.image_size = 8;
  cfg.visual_channels = {4, 8};
  return cfg;
}

corpus::EncodedQuestion item(const std::string& id, std::vector<int> toks, int max_len,
                             int n_images = 0, int image_size = 8, std::uint64_t img_seed = 1) {
  corpus::EncodedQuestion e;
  e.id = id;
  e.n_real_tokens = int(toks.size());
  e.token_ids.assign(std::size_t(max_len), corpus::kPadId);
  e.mask.assign(std::size_t(max_len), 0.0);
  for (std::size_t i = 0; i < toks.size(); ++i) {
    e.token_ids[i] = toks[i];
    e.mask[i] = 1.0;
  }
  auto rng = derived_rng(img_seed, id, 7);
  for (int k = 0; k < n_images; ++k) {
    img::Image im;
    im.h = im.w = image_size;
    im.data.resize(3, image_size * image_size);
    for (Eigen::Index i = 0; i < im.data.size(); ++i) im.data(i) = uniform(rng);
    e.images.push_back(std::move(im));
  }
  return e;
}

}  // namespace

TEST_CASE("config validation") {
  auto cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.d_model = 15;  // not divisible by heads
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = small_config();
  cfg.vocab_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
}

TEST_CASE("embed_batch: shape, unit norm, determinism") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p = net.init_params(3);
  model::Batch batch = {item("a", {3, 4, 5}, 8, 1), item("b", {6, 7}, 8),
                        item("c", {8, 9, 10, 11}, 8, 2)};
  Mat e1 = net.embed_batch(p, batch).value();
  REQUIRE(e1.rows() == 3);
  REQUIRE(e1.cols() == cfg.d_model);
  for (Eigen::Index i = 0; i < 3; ++i)
    CHECK(e1.row(i).norm() == Catch::Approx(1.0).margin(1e-9));
  Mat e2 = net.embed_batch(p, batch).value();
  CHECK(e1 == e2);

  // same item embeds identically regardless of batch company (batch-independent norm)
  Mat solo = net.embed_batch(p, {batch[0]}).value();
  CHECK((solo.row(0) - e1.row(0)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("padding content beyond the mask cannot influence the embedding") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p = net.init_params(4);
  auto a = item("a", {3, 4, 5}, 8, 1);
  auto garbled = a;
  for (int i = a.n_real_tokens; i < 8; ++i) garbled.token_ids[std::size_t(i)] = 17;  // junk ids under pad mask
  Mat ea = net.embed_batch(p, {a}).value();
  Mat eg = net.embed_batch(p, {garbled}).value();
  CHECK((ea - eg).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("visual token order does not change the embedding") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p = net.init_params(5);
  auto q = item("a", {3, 4}, 8, 3);
  auto swapped = q;
  std::swap(swapped.images[0], swapped.images[2]);
  Mat e1 = net.embed_batch(p, {q}).value();
  Mat e2 = net.embed_batch(p, {swapped}).value();
  CHECK((e1 - e2).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("joint fusion without images equals the plain text stream") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p = net.init_params(6);
  model::Batch batch = {item("a", {3, 4, 5}, 8), item("b", {6}, 8)};
  Mat joint = net.embed_batch(p, batch, model::Fusion::joint).value();
  Mat text = net.embed_text_stream(p, batch).value();
  CHECK((joint - text).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("text-only modality ignores images entirely") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p = net.init_params(7);
  auto with_img = item("a", {3, 4, 5}, 8, 2);
  auto without = with_img;
  without.images.clear();
  Mat e1 = net.embed_batch(p, {with_img}, model::Fusion::coordinated,
                           model::Modality::text_only)
               .value();
  Mat e2 = net.embed_batch(p, {without}, model::Fusion::coordinated,
                           model::Modality::text_only)
               .value();
  CHECK(e1 == e2);
}

TEST_CASE("image-only stream requires at least one image") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p = net.init_params(8);
  CHECK_THROWS_AS(net.embed_image_stream(p, {item("a", {3}, 8, 0)}), ArgumentError);
  Mat e = net.embed_image_stream(p, {item("a", {3}, 8, 2)}).value();
  CHECK(e.rows() == 1);
  CHECK(e.row(0).norm() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("mlm logits cover the vocabulary per position") {
  auto cfg = small_config(23);
  model::TQNet net(cfg);
  auto p = net.init_params(9);
  model::Batch batch = {item("a", {3, 4}, 8), item("b", {5}, 8)};
  Var feats = net.text_features(p, batch);
  REQUIRE(feats.rows() == 2 * 8);
  REQUIRE(feats.cols() == cfg.d_model);
  Var logits = net.mlm_logits(p, feats);
  CHECK(logits.rows() == 2 * 8);
  CHECK(logits.cols() == 23);
}

TEST_CASE("coordinated and joint fusion produce different embeddings with images") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p = net.init_params(10);
  model::Batch batch = {item("a", {3, 4, 5}, 8, 1)};
  Mat c = net.embed_batch(p, batch, model::Fusion::coordinated).value();
  Mat j = net.embed_batch(p, batch, model::Fusion::joint).value();
  CHECK((c - j).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("gradients reach every parameter the forward pass touches") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p = net.init_params(11);
  model::Batch batch = {item("a", {3, 4, 5}, 8, 1), item("b", {6, 7}, 8, 1)};
  ad::Tape tape;
  Var emb = net.embed_batch(p, batch);
  Var loss = ad::mean(emb);
  nn::zero_grads(p);
  tape.backward(loss);
  for (const auto& [name, v] : p) {
    if (name.rfind("mlm", 0) == 0) continue;  // only used by mlm_logits
    INFO(name);
    CHECK(v.grad().size() > 0);
  }
}

TEST_CASE("init_params is seed-deterministic") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p1 = net.init_params(42);
  auto p2 = net.init_params(42);
  auto p3 = net.init_params(43);
  REQUIRE(p1.size() == p2.size());
  bool all_eq = true, any_diff = false;
  for (const auto& [name, v] : p1) {
    all_eq = all_eq && v.value() == p2.at(name).value();
    any_diff = any_diff || v.value() != p3.at(name).value();
  }
  CHECK(all_eq);
  CHECK(any_diff);
}

TEST_CASE("errors: empty batch, oversized image list, bad token ids") {
  auto cfg = small_config();
  model::TQNet net(cfg);
  auto p = net.init_params(12);
  CHECK_THROWS_AS(net.embed_batch(p, {}), ArgumentError);
  auto q = item("a", {3}, 8, 1);
  for (int i = 0; i < cfg.max_images; ++i) q.images.push_back(q.images[0]);
  CHECK_THROWS_AS(net.embed_batch(p, {q}), ArgumentError);
  auto bad = item("b", {39}, 8);
  bad.token_ids[0] = 40;  // out of vocab
  CHECK_THROWS_AS(net.embed_batch(p, {bad}), ArgumentError);
}
