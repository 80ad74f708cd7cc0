#include <catch2/catch_amalgamated.hpp>

#include "tqnet/config.hpp"
#include "tqnet/manifest.hpp"

using namespace tqnet;
using json = nlohmann::json;
namespace fs = std::filesystem;

TEST_CASE("config: defaults when sections are absent") {
  auto c = config::parse(json::object());
  CHECK(c.seed == 42);
  CHECK(c.corpus.n_questions == 2000);
  CHECK(c.corpus.seed == 42);
  CHECK(c.pretrain.tau == 0.2);
  CHECK(c.pretrain.m == 0.999);
  CHECK(c.pretrain.queue_size == 4096);
  CHECK(c.finetune.tau == 0.2);
  CHECK(c.model.d_model == 128);
  CHECK(c.eval.k == 5);
}

TEST_CASE("config: seed propagates into sections unless overridden") {
  auto c = config::parse(json{{"seed", 7}});
  CHECK(c.corpus.seed == 7);
  CHECK(c.pretrain.seed == 7);
  CHECK(c.finetune.seed == 7);
  auto c2 = config::parse(json{{"seed", 7}, {"pretrain", {{"seed", 9}}}});
  CHECK(c2.pretrain.seed == 9);
  CHECK(c2.corpus.seed == 7);
}

TEST_CASE("config: unknown keys rejected everywhere") {
  CHECK_THROWS_AS(config::parse(json{{"bogus", 1}}), FormatError);
  CHECK_THROWS_AS(config::parse(json{{"corpus", {{"bogus", 1}}}}), FormatError);
  CHECK_THROWS_AS(config::parse(json{{"model", {{"vocab_size", 10}}}}), FormatError);
  CHECK_THROWS_AS(config::parse(json{{"pretrain", {{"nope", 1}}}}), FormatError);
  CHECK_THROWS_AS(config::parse(json{{"eval", {{"zzz", 1}}}}), FormatError);
}

TEST_CASE("config: typed parsing of nested sections") {
  json j{{"seed", 3},
         {"corpus", {{"n_questions", 300}, {"image_fraction", 0.5}}},
         {"augment", {{"mask_prob", 0.2}, {"window_frac_range", {0.8, 1.0}}}},
         {"model", {{"d_model", 32}, {"n_heads", 4}, {"norm_style", "batch_dependent"}}},
         {"pretrain", {{"strategy", "mcl"}, {"scope", "seq"}, {"fusion", "joint"}, {"steps", 5}}},
         {"finetune", {{"method", "pair"}, {"epochs", 2}}},
         {"eval", {{"k", 3}}}};
  auto c = config::parse(j);
  CHECK(c.corpus.n_questions == 300);
  CHECK(c.corpus.image_fraction == 0.5);
  CHECK(c.augment.mask_prob == 0.2);
  CHECK(c.augment.window_lo == 0.8);
  CHECK(c.model.d_model == 32);
  CHECK(c.model.norm_style == model::NormStyle::batch_dependent);
  CHECK(c.pretrain.strategy == pretrain::Strategy::MCL);
  CHECK(c.pretrain.scope == pretrain::Scope::SEQ);
  CHECK(c.pretrain.fusion == model::Fusion::joint);
  CHECK(c.pretrain.steps == 5);
  CHECK(c.pretrain.augment.mask_prob == 0.2);  // augment flows into pretraining
  CHECK(c.finetune.method == finetune::Method::PAIR);
  CHECK(c.eval.k == 3);
  // model sequence length never exceeds what the corpus provides
  CHECK(c.model.max_len <= c.corpus.max_len);

  CHECK_THROWS_AS(config::parse(json{{"augment", {{"window_frac_range", {0.8}}}}}),
                  FormatError);
  CHECK_THROWS_AS(config::parse(json{{"pretrain", {{"strategy", "xxx"}}}}), ArgumentError);
}

TEST_CASE("config: file loading and hash stability") {
  auto dir = fs::temp_directory_path() / "tqnet_test_config";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "good.json");
    f << R"({"seed": 5, "pretrain": {"steps": 2}})";
    std::ofstream g(dir / "bad.json");
    g << "{nope";
  }
  auto c = config::load(dir / "good.json");
  CHECK(c.seed == 5);
  CHECK_THROWS_AS(config::load(dir / "bad.json"), FormatError);
  CHECK_THROWS_AS(config::load(dir / "missing.json"), FormatError);

  json j1{{"seed", 5}};
  CHECK(config::config_hash(j1) == config::config_hash(json{{"seed", 5}}));
  CHECK(config::config_hash(j1) != config::config_hash(json{{"seed", 6}}));
}

TEST_CASE("manifest: append requires artifacts to exist, integrity walk flags loss") {
  auto dir = fs::temp_directory_path() / "tqnet_test_manifest";
  fs::remove_all(dir);
  manifest::RunManifest m(dir);

  CHECK_THROWS_AS(m.append("stage", 1, {dir / "ghost.bin"}, 0.1), IntegrityError);

  const fs::path art = dir / "artifact.txt";
  std::ofstream(art) << "x";
  m.append("pretrain", 123, {art}, 1.5);
  CHECK(m.verify_integrity());
  CHECK(m.has_config_hash(123, "pretrain"));
  CHECK_FALSE(m.has_config_hash(123, "eval"));
  CHECK_FALSE(m.has_config_hash(124, "pretrain"));

  fs::remove(art);
  std::vector<std::string> missing;
  CHECK_FALSE(m.verify_integrity(&missing));
  REQUIRE(missing.size() == 1);
  CHECK(missing[0] == art.string());
}

TEST_CASE("experiments.csv accumulates one row per metric") {
  auto dir = fs::temp_directory_path() / "tqnet_test_csv";
  fs::remove_all(dir);
  fs::create_directories(dir);
  evaluate::EvalReport rep;
  rep.task = "similar";
  rep.subset = "all";
  rep.metrics["p_at_k"] = 0.5;
  rep.k = 5;
  rep.n_queries = 10;
  rep.checkpoint_id = "abc";
  rep.seed = 1;
  manifest::append_experiment_row(dir, rep);
  rep.task = "kp";
  rep.subset = "";
  rep.metrics = {{"f1_micro", 0.4}, {"f1_macro", 0.3}};
  manifest::append_experiment_row(dir, rep);

  std::ifstream f(dir / "experiments.csv");
  std::string line;
  std::getline(f, line);
  CHECK(line == "task,subset,metric,value,k,n_queries,checkpoint_id,seed");
  int rows = 0;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);
}
