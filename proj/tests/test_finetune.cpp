#include <catch2/catch_amalgamated.hpp>

#include "tqnet/finetune.hpp"

using namespace tqnet;
using ad::Mat;
using ad::Var;

namespace {

Mat unit_rows(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = normal(rng);
    m.row(i).normalize();
  }
  return m;
}

// direct per-ordered-pair evaluation of the supervised contrastive objective
double scl_direct(const Mat& e, const Mat& labels, double tau) {
  const Eigen::Index B = e.rows();
  Mat s = e * e.transpose() / tau;
  double total = 0.0;
  int n = 0;
  for (Eigen::Index i = 0; i < B; ++i)
    for (Eigen::Index j = 0; j < B; ++j) {
      if (labels(i, j) != 1.0) continue;
      double denom = std::exp(s(i, j));
      for (Eigen::Index o = 0; o < B; ++o)
        if (o != i && labels(i, o) == 0.0) denom += std::exp(s(i, o));
      total += -std::log(std::exp(s(i, j)) / denom);
      ++n;
    }
  return total / n;
}

Mat random_labels(std::mt19937_64& rng, Eigen::Index B) {
  Mat l = Mat::Zero(B, B);
  do {
    for (Eigen::Index i = 0; i < B; ++i)
      for (Eigen::Index j = i + 1; j < B; ++j)
        l(i, j) = l(j, i) = uniform(rng) < 0.3 ? 1.0 : 0.0;
  } while (l.sum() == 0.0);
  return l;
}

}  // namespace

TEST_CASE("label matrix: symmetric, zero diagonal, duplicate ids rejected") {
  corpus::SimilarityGroundTruth gt;
  gt.add("a", "b");
  gt.add("b", "c");
  Mat m = finetune::build_label_matrix({"a", "b", "c", "d"}, gt);
  Mat expect(4, 4);
  expect << 0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 0, 0, 0;
  CHECK(m == expect);
  CHECK_THROWS_AS(finetune::build_label_matrix({"a", "a"}, gt), ArgumentError);
}

TEST_CASE("scl: single positive pair with no negatives is already optimal") {
  Mat e(2, 3);
  e << 1, 0, 0, 0.6, 0.8, 0;
  Mat l(2, 2);
  l << 0, 1, 1, 0;
  // both ordered terms have an empty negative set: -log(pos/pos) = 0
  CHECK(finetune::scl_loss(Var(e), l, 0.2).scalar() == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("scl: uniform scores with one positive and two negatives give ln 3") {
  Mat e = Mat::Zero(4, 2);
  e.col(0).setOnes();  // identical embeddings -> identical scores
  Mat l = Mat::Zero(4, 4);
  l(0, 1) = l(1, 0) = 1.0;
  l(2, 3) = l(3, 2) = 1.0;
  CHECK(finetune::scl_loss(Var(e), l, 0.5).scalar() ==
        Catch::Approx(std::log(3.0)).margin(1e-12));
}

TEST_CASE("scl matches direct evaluation on random batches") {
  std::mt19937_64 rng(55);
  for (int trial = 0; trial < 300; ++trial) {
    const Eigen::Index B = 2 + Eigen::Index(uniform_int(rng, 0, 6));
    const int d = 3 + int(uniform_int(rng, 0, 9));
    const double tau = uniform(rng, 0.05, 1.0);
    Mat e = unit_rows(rng, B, d);
    Mat l = random_labels(rng, B);
    CHECK(std::abs(finetune::scl_loss(Var(e), l, tau).scalar() - scl_direct(e, l, tau)) <
          1e-6);
  }
}

TEST_CASE("scl with one positive pair equals symmetrized info_nce") {
  std::mt19937_64 rng(56);
  const int d = 8, K = 6;
  Mat q = unit_rows(rng, 1, d), k = unit_rows(rng, 1, d), negs = unit_rows(rng, K, d);
  Mat batch(K + 2, d);
  batch.row(0) = q.row(0);
  batch.row(1) = k.row(0);
  batch.bottomRows(K) = negs;
  Mat l = Mat::Zero(K + 2, K + 2);
  l(0, 1) = l(1, 0) = 1.0;
  const double tau = 0.2;
  const double scl = finetune::scl_loss(Var(batch), l, tau).scalar();
  const double nce_fwd = pretrain::info_nce(Var(q), k, negs, tau).scalar();
  const double nce_bwd = pretrain::info_nce(Var(k), q, negs, tau).scalar();
  CHECK(std::abs(scl - 0.5 * (nce_fwd + nce_bwd)) < 1e-9);
}

TEST_CASE("scl is invariant to a consistent batch permutation") {
  std::mt19937_64 rng(57);
  const Eigen::Index B = 6;
  Mat e = unit_rows(rng, B, 5);
  Mat l = random_labels(rng, B);
  std::vector<int> perm = {3, 0, 5, 1, 4, 2};
  Mat ep(B, 5);
  Mat lp = Mat::Zero(B, B);
  for (Eigen::Index i = 0; i < B; ++i) {
    ep.row(i) = e.row(perm[std::size_t(i)]);
    for (Eigen::Index j = 0; j < B; ++j)
      lp(i, j) = l(perm[std::size_t(i)], perm[std::size_t(j)]);
  }
  CHECK(finetune::scl_loss(Var(e), l, 0.3).scalar() ==
        Catch::Approx(finetune::scl_loss(Var(ep), lp, 0.3).scalar()).margin(1e-10));
}

TEST_CASE("scl input validation") {
  Mat e = Mat::Identity(3, 3);
  Mat ok = Mat::Zero(3, 3);
  ok(0, 1) = ok(1, 0) = 1.0;
  CHECK_THROWS_AS(finetune::scl_loss(Var(e), ok, -1.0), ArgumentError);
  CHECK_THROWS_AS(finetune::scl_loss(Var(e), Mat::Zero(2, 2), 0.2), ArgumentError);
  Mat diag = ok;
  diag(1, 1) = 1.0;
  CHECK_THROWS_AS(finetune::scl_loss(Var(e), diag, 0.2), ArgumentError);
  Mat asym = ok;
  asym(1, 0) = 0.0;
  CHECK_THROWS_AS(finetune::scl_loss(Var(e), asym, 0.2), ArgumentError);
  CHECK_THROWS_AS(finetune::scl_loss(Var(e), Mat::Zero(3, 3), 0.2), ArgumentError);
}

TEST_CASE("scl gradients match finite differences") {
  std::mt19937_64 rng(58);
  Var e(unit_rows(rng, 5, 4), true);
  Mat l = random_labels(rng, 5);
  const double tau = 0.25;
  Mat analytic;
  {
    ad::Tape tape;
    Var loss = finetune::scl_loss(e, l, tau);
    tape.backward(loss);
    analytic = e.grad();
  }
  const double eps = 1e-6;
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index j = 0; j < e.cols(); ++j) {
      const double orig = e.value()(i, j);
      e.value()(i, j) = orig + eps;
      const double lp = finetune::scl_loss(e, l, tau).scalar();
      e.value()(i, j) = orig - eps;
      const double lm = finetune::scl_loss(e, l, tau).scalar();
      e.value()(i, j) = orig;
      const double num = (lp - lm) / (2 * eps);
      CHECK(std::abs(num - analytic(i, j)) <
            1e-4 * std::max({std::abs(num), std::abs(analytic(i, j)), 1.0}));
    }
}

TEST_CASE("pair head: swap symmetry and probability range") {
  std::mt19937_64 rng(59);
  nn::Parameters p;
  finetune::add_pair_head(p, 8, rng);
  Var u(unit_rows(rng, 4, 8)), v(unit_rows(rng, 4, 8));
  Mat ab = finetune::pair_logit(p, u, v).value();
  Mat ba = finetune::pair_logit(p, v, u).value();
  CHECK((ab - ba).cwiseAbs().maxCoeff() < 1e-12);
  for (Eigen::Index i = 0; i < ab.rows(); ++i) {
    CHECK(ab(i, 0) > 0.0);
    CHECK(ab(i, 0) < 1.0);
  }
}

namespace {

struct Fixture {
  corpus::CorpusBundle bundle;
  corpus::TokenVocab vocab;
  model::ModelConfig mcfg;

  Fixture() {
    corpus::GeneratorConfig g;
    g.n_questions = 40;
    g.n_kp = 2;
    g.image_fraction = 0.3;
    g.n_pairs_train = 120;
    g.n_pairs_test = 60;
    g.vocab_size = 120;
    g.seed = 21;
    auto dir = std::filesystem::temp_directory_path() / "tqnet_test_finetune_corpus";
    std::filesystem::remove_all(dir);
    bundle = corpus::generate_synthetic_corpus(g, dir);
    vocab = corpus::build_vocab(bundle);
    mcfg.d_model = 16;
    mcfg.n_text_layers = 1;
    mcfg.n_fusion_layers = 1;
    mcfg.n_heads = 2;
    mcfg.vocab_size = vocab.size();
    mcfg.max_len = 16;
    mcfg.image_size = 16;
    mcfg.visual_channels = {4, 8};
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

checkpoint::Checkpoint fresh_ckpt(const Fixture& f, const model::TQNet& net,
                                  std::uint64_t seed) {
  checkpoint::Checkpoint ck;
  ck.config = f.mcfg;
  ck.params = net.init_params(seed);
  ck.stage = "random";
  ck.vocab_hash = f.vocab.content_hash();
  ck.seed = seed;
  return ck;
}

}  // namespace

TEST_CASE("finetune: scl path trains, records lineage, stays deterministic") {
  const auto& f = fixture();
  model::TQNet net(f.mcfg);
  auto start = fresh_ckpt(f, net, 4);
  finetune::FinetuneConfig cfg;
  cfg.method = finetune::Method::SCL;
  cfg.batch_size = 8;
  cfg.epochs = 1;
  cfg.seed = 4;
  auto r1 = finetune::finetune(start, f.bundle, f.vocab, net, cfg);
  auto r2 = finetune::finetune(start, f.bundle, f.vocab, net, cfg);
  CHECK(r1.ckpt.id() == r2.ckpt.id());
  CHECK(r1.ckpt.stage == "finetune");
  CHECK(r1.ckpt.method == "scl");
  CHECK(r1.ckpt.parent == start.id());
  REQUIRE(r1.epoch_losses.size() == 1);
  CHECK(r1.epoch_losses[0] > 0.0);
  // parameters actually moved
  bool moved = false;
  for (const auto& [name, v] : r1.ckpt.params)
    moved = moved || v.value() != start.params.at(name).value();
  CHECK(moved);
}

TEST_CASE("finetune: pair path adds a head and learns the pair task") {
  const auto& f = fixture();
  model::TQNet net(f.mcfg);
  auto start = fresh_ckpt(f, net, 5);
  finetune::FinetuneConfig cfg;
  cfg.method = finetune::Method::PAIR;
  cfg.batch_size = 8;
  cfg.epochs = 2;
  cfg.seed = 5;
  cfg.lr = 1e-3;
  auto r = finetune::finetune(start, f.bundle, f.vocab, net, cfg);
  CHECK(r.ckpt.method == "pair");
  CHECK(r.ckpt.params.count("pair.fc1.w") == 1);
  CHECK(r.ckpt.params.count("pair.fc2.w") == 1);
  REQUIRE(r.epoch_losses.size() == 2);
  CHECK(r.epoch_losses[1] <= r.epoch_losses[0] * 1.2);  // no blow-up
}

TEST_CASE("finetune config validation") {
  finetune::FinetuneConfig cfg;
  cfg.tau = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ArgumentError);
  CHECK_THROWS_AS(finetune::method_from("nope"), ArgumentError);
  CHECK(finetune::method_name(finetune::Method::SCL) == "scl");
}
