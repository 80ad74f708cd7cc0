// Command-line front end: gen-data / pretrain / finetune / eval / verify.
// Exit codes: 0 success, 1 verification or metric failure, 2 usage/config error.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "tqnet/config.hpp"
#include "tqnet/manifest.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tqnet;

namespace {

struct Cli {
  std::string config_path;
  std::string out_override;
  std::string corpus_override;
  bool force = false;
};

json load_config_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw FormatError("config: cannot open " + path);
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw FormatError("config: invalid JSON in " + path);
  return j;
}

fs::path out_root(const Cli& cli, const config::ExperimentConfig& cfg) {
  if (!cli.out_override.empty()) return cli.out_override;
  if (const char* env = std::getenv("TQNET_OUT"); env && *env) return env;
  return cfg.out_dir;
}

fs::path corpus_dir(const Cli& cli, const fs::path& out) {
  return cli.corpus_override.empty() ? out / "corpus" : fs::path(cli.corpus_override);
}

// refuse silent re-runs of an identical configuration
void guard_rerun(manifest::RunManifest& man, std::uint64_t hash, const std::string& stage,
                 bool force) {
  if (!force && man.has_config_hash(hash, stage))
    throw ArgumentError("stage \"" + stage +
                        "\" already ran with this exact configuration; pass --force to rerun");
}

void write_loss_csv(const fs::path& path, const std::vector<std::pair<int, double>>& curve) {
  std::ofstream f(path);
  f << "step,loss\n";
  for (const auto& [s, l] : curve) f << s << "," << l << "\n";
}

int cmd_gen_data(const Cli& cli) {
  json j = load_config_json(cli.config_path);
  auto cfg = config::parse(j);
  const fs::path out = out_root(cli, cfg);
  const fs::path dir = corpus_dir(cli, out);
  manifest::RunManifest man(out);
  j["__cmd"] = "gen-data";
  const std::uint64_t h = config::config_hash(j);
  guard_rerun(man, h, "gen-data", cli.force);

  const auto t0 = std::chrono::steady_clock::now();
  corpus::generate_synthetic_corpus(cfg.corpus, dir);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  man.append("gen-data", h, {dir / "questions.jsonl", dir / "pairs_train.jsonl",
                             dir / "pairs_test.jsonl", dir / "generator.json"},
             secs);
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const Cli& cli, const std::string& strategy, const std::string& scope,
                 const std::string& fusion) {
  json j = load_config_json(cli.config_path);
  auto cfg = config::parse(j);
  if (!strategy.empty()) cfg.pretrain.strategy = pretrain::strategy_from(strategy);
  if (!scope.empty()) cfg.pretrain.scope = pretrain::scope_from(scope);
  if (!fusion.empty()) cfg.pretrain.fusion = model::fusion_from(fusion);

  const fs::path out = out_root(cli, cfg);
  const fs::path cdir = corpus_dir(cli, out);
  manifest::RunManifest man(out);
  j["__cmd"] = "pretrain:" + pretrain::strategy_name(cfg.pretrain.strategy) + ":" +
               pretrain::scope_name(cfg.pretrain.scope) + ":" +
               model::fusion_name(cfg.pretrain.fusion);
  const std::uint64_t h = config::config_hash(j);
  guard_rerun(man, h, "pretrain", cli.force);

  auto bundle = corpus::load_corpus(cdir);
  auto vocab = corpus::build_vocab(bundle);
  cfg.model.vocab_size = vocab.size();
  model::TQNet net(cfg.model);

  const auto t0 = std::chrono::steady_clock::now();
  auto res = pretrain::pretrain(bundle, vocab, net, cfg.pretrain);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::string tag = pretrain::strategy_name(cfg.pretrain.strategy) + "-" +
                          pretrain::scope_name(cfg.pretrain.scope) + "-" +
                          model::fusion_name(cfg.pretrain.fusion) + "-s" +
                          std::to_string(cfg.pretrain.seed);
  const fs::path ckdir = out / ("ckpt-" + tag);
  checkpoint::save(ckdir, res.ckpt);
  write_loss_csv(ckdir / "loss.csv", res.loss_curve);
  man.append("pretrain", h, {ckdir / "manifest.json", ckdir / "params.bin", ckdir / "loss.csv"},
             secs);
  std::cout << ckdir.string() << "\n";
  return 0;
}

int cmd_finetune(const Cli& cli, const std::string& method, const std::string& from) {
  json j = load_config_json(cli.config_path);
  auto cfg = config::parse(j);
  if (!method.empty()) cfg.finetune.method = finetune::method_from(method);

  const fs::path out = out_root(cli, cfg);
  const fs::path cdir = corpus_dir(cli, out);
  manifest::RunManifest man(out);
  j["__cmd"] = "finetune:" + finetune::method_name(cfg.finetune.method) + ":" + from;
  const std::uint64_t h = config::config_hash(j);
  guard_rerun(man, h, "finetune", cli.force);

  auto bundle = corpus::load_corpus(cdir);
  auto vocab = corpus::build_vocab(bundle);

  checkpoint::Checkpoint start;
  if (from.empty()) {
    // no pretraining: the fine-tune baseline starts from a fresh encoder
    cfg.model.vocab_size = vocab.size();
    model::TQNet net(cfg.model);
    start.config = cfg.model;
    start.params = net.init_params(cfg.seed);
    start.stage = "random";
    start.vocab_hash = vocab.content_hash();
    start.seed = cfg.seed;
  } else {
    if (!fs::exists(fs::path(from) / "manifest.json"))
      throw ArgumentError("checkpoint not found: " + from);
    start = checkpoint::load(from);
    if (start.vocab_hash != vocab.content_hash())
      throw IntegrityError("checkpoint vocabulary does not match this corpus");
  }
  model::TQNet net(start.config);

  const auto t0 = std::chrono::steady_clock::now();
  auto res = finetune::finetune(start, bundle, vocab, net, cfg.finetune);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path ckdir =
      out / ("ckpt-ft-" + finetune::method_name(cfg.finetune.method) + "-s" +
             std::to_string(cfg.finetune.seed));
  checkpoint::save(ckdir, res.ckpt);
  {
    std::ofstream f(ckdir / "loss.csv");
    f << "epoch,loss\n";
    for (std::size_t e = 0; e < res.epoch_losses.size(); ++e)
      f << e << "," << res.epoch_losses[e] << "\n";
  }
  man.append("finetune", h, {ckdir / "manifest.json", ckdir / "params.bin", ckdir / "loss.csv"},
             secs);
  std::cout << ckdir.string() << "\n";
  return 0;
}

int cmd_eval(const Cli& cli, const std::string& task, const std::string& subset,
             const std::string& from) {
  json j = load_config_json(cli.config_path);
  auto cfg = config::parse(j);
  const fs::path out = out_root(cli, cfg);
  const fs::path cdir = corpus_dir(cli, out);
  manifest::RunManifest man(out);

  auto bundle = corpus::load_corpus(cdir);
  auto vocab = corpus::build_vocab(bundle);
  if (!fs::exists(fs::path(from) / "manifest.json"))
    throw ArgumentError("checkpoint not found: " + from);
  auto ck = checkpoint::load(from);
  model::TQNet net(ck.config);

  const auto t0 = std::chrono::steady_clock::now();
  evaluate::EvalReport rep;
  if (task == "similar") {
    rep = evaluate::eval_similar(ck, net, bundle, vocab, evaluate::subset_from(subset),
                                 cfg.eval.k);
  } else if (task == "kp") {
    rep = evaluate::eval_kp(ck, net, bundle, vocab, cfg.eval.kp_batch_size,
                            cfg.eval.kp_epochs);
  } else {
    throw ArgumentError("unknown task: " + task);
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path rpath =
      out / ("report-" + rep.task + (rep.subset.empty() ? "" : "-" + rep.subset) + "-" +
             rep.checkpoint_id + ".json");
  std::ofstream(rpath) << rep.to_json().dump(2) << "\n";
  manifest::append_experiment_row(out, rep);
  j["__cmd"] = "eval:" + task + ":" + subset + ":" + rep.checkpoint_id;
  man.append("eval", config::config_hash(j), {rpath, out / "experiments.csv"}, secs);
  std::cout << rep.to_json().dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// verify: fast named invariant checks

struct Verifier {
  bool ok = true;
  void check(const std::string& name, bool pass) {
    std::cout << (pass ? "ok   " : "FAIL ") << name << "\n";
    ok = ok && pass;
  }
};

double info_nce_direct(const ad::Mat& q, const ad::Mat& k, const ad::Mat& queue, double tau) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    const double pos = std::exp(q.row(i).dot(k.row(i)) / tau);
    double denom = pos;
    for (Eigen::Index j = 0; j < queue.rows(); ++j)
      denom += std::exp(q.row(i).dot(queue.row(j)) / tau);
    total += -std::log(pos / denom);
  }
  return total / double(q.rows());
}

double scl_direct(const ad::Mat& e, const ad::Mat& labels, double tau) {
  const Eigen::Index B = e.rows();
  ad::Mat s = e * e.transpose() / tau;
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

ad::Mat unit_rows(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  ad::Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = normal(rng);
    m.row(i).normalize();
  }
  return m;
}

int cmd_verify(const Cli& cli) {
  Verifier v;
  std::mt19937_64 rng(12345);

  {  // contrastive loss against the direct formula
    bool pass = true;
    for (int t = 0; t < 200 && pass; ++t) {
      const int B = 1 + int(uniform_int(rng, 0, 7));
      const int K = 1 + int(uniform_int(rng, 0, 31));
      const int d = 2 + int(uniform_int(rng, 0, 14));
      const double tau = uniform(rng, 0.05, 1.0);
      ad::Mat q = unit_rows(rng, B, d), k = unit_rows(rng, B, d),
              queue = unit_rows(rng, K, d);
      pass = std::abs(pretrain::info_nce(ad::Var(q), k, queue, tau).scalar() -
                      info_nce_direct(q, k, queue, tau)) < 1e-6;
    }
    v.check("contrastive-loss-oracle", pass);
  }
  {  // uniform-similarity closed form ln(K+1)
    ad::Mat q(1, 3), k(1, 3), queue(3, 3);
    q << 1, 0, 0;
    k = q;
    for (int i = 0; i < 3; ++i) queue.row(i) = q.row(0);
    v.check("contrastive-loss-uniform-lnK1",
            std::abs(pretrain::info_nce(ad::Var(q), k, queue, 0.7).scalar() -
                     std::log(4.0)) < 1e-9);
  }
  {  // momentum update contraction, including a deliberately bad m
    bool pass = true;
    for (double m : {0.0, 0.5, 0.999, 1.0 - 1e-6}) {
      pretrain::MomentumState st;
      st.m = m;
      st.p_query.emplace("w", ad::Var(unit_rows(rng, 4, 6), true));
      st.p_key.emplace("w", ad::Var(unit_rows(rng, 4, 6), true));
      const double gap0 =
          (st.p_key.at("w").value() - st.p_query.at("w").value()).norm();
      pretrain::momentum_update(st);
      const double gap1 =
          (st.p_key.at("w").value() - st.p_query.at("w").value()).norm();
      pass = pass && std::abs(gap1 - m * gap0) <= 1e-12 * std::max(1.0, gap0);
    }
    v.check("momentum-update-contraction", pass);
  }
  {  // supervised contrastive loss against the direct formula
    bool pass = true;
    for (int t = 0; t < 200 && pass; ++t) {
      const Eigen::Index B = 2 + Eigen::Index(uniform_int(rng, 0, 6));
      ad::Mat e = unit_rows(rng, B, 6);
      ad::Mat l = ad::Mat::Zero(B, B);
      do {
        for (Eigen::Index i = 0; i < B; ++i)
          for (Eigen::Index j = i + 1; j < B; ++j)
            l(i, j) = l(j, i) = uniform(rng) < 0.3 ? 1.0 : 0.0;
      } while (l.sum() == 0.0);
      const double tau = uniform(rng, 0.05, 1.0);
      pass = std::abs(finetune::scl_loss(ad::Var(e), l, tau).scalar() -
                      scl_direct(e, l, tau)) < 1e-6;
    }
    v.check("supervised-contrastive-oracle", pass);
  }
  {  // P@k against brute-force set intersection
    bool pass = true;
    corpus::SimilarityGroundTruth gt;
    for (int i = 0; i < 5; ++i) {
      gt.add("q1", "a" + std::to_string(i));
      gt.add("q2", "b" + std::to_string(i));
    }
    evaluate::PredictionMap pred;
    pred["q1"] = {"a0", "a1", "a2", "x", "y"};
    pred["q2"] = {"b4", "b3", "b2", "b1", "b0"};
    pass = std::abs(evaluate::precision_at_k(pred, gt, 5) - 0.8) < 1e-12;
    v.check("precision-at-k-hand-case", pass);
  }
  {  // gradient spot-check through a small fused forward pass
    model::ModelConfig mc;
    mc.d_model = 16;
    mc.n_text_layers = 1;
    mc.n_fusion_layers = 1;
    mc.n_heads = 2;
    mc.vocab_size = 20;
    mc.max_len = 4;
    mc.image_size = 8;
    mc.visual_channels = {4};
    model::TQNet net(mc);
    auto p = net.init_params(1);
    corpus::EncodedQuestion e;
    e.id = "v";
    e.token_ids = {3, 4, 5, 0};
    e.mask = {1, 1, 1, 0};
    e.n_real_tokens = 3;
    auto& tok = nn::param(p, "text.tok_emb");
    auto fwd = [&]() {
      ad::Var emb = net.embed_batch(p, {e});
      return ad::mean(emb);
    };
    ad::Mat analytic;
    {
      ad::Tape tape;
      nn::zero_grads(p);
      ad::Var loss = fwd();
      tape.backward(loss);
      analytic = tok.grad();
    }
    const double eps = 1e-6;
    bool pass = true;
    for (int trial = 0; trial < 10 && pass; ++trial) {
      const Eigen::Index i = Eigen::Index(uniform_int(rng, 3, 5));
      const Eigen::Index j = Eigen::Index(uniform_int(rng, 0, mc.d_model - 1));
      const double orig = tok.value()(i, j);
      tok.value()(i, j) = orig + eps;
      const double lp = fwd().scalar();
      tok.value()(i, j) = orig - eps;
      const double lm = fwd().scalar();
      tok.value()(i, j) = orig;
      const double num = (lp - lm) / (2 * eps);
      pass = std::abs(num - analytic(i, j)) <
             1e-4 * std::max({std::abs(num), std::abs(analytic(i, j)), 1e-3});
    }
    v.check("encoder-gradient-check", pass);
  }
  {  // generator determinism
    corpus::GeneratorConfig g;
    g.n_questions = 40;
    g.n_kp = 2;
    g.n_pairs_train = 120;
    g.n_pairs_test = 60;
    g.vocab_size = 120;
    g.seed = 5;
    auto base = fs::temp_directory_path() / "tqnet_verify";
    fs::remove_all(base);
    auto b1 = corpus::generate_synthetic_corpus(g, base / "a");
    auto b2 = corpus::generate_synthetic_corpus(g, base / "b");
    v.check("generator-determinism", b1 == b2);
    fs::remove_all(base);
  }
  {  // manifest integrity walk over the active output root
    config::ExperimentConfig cfg;
    const fs::path out = out_root(cli, cfg);
    if (fs::exists(out / "manifest.jsonl")) {
      manifest::RunManifest man(out);
      std::vector<std::string> missing;
      const bool pass = man.verify_integrity(&missing);
      for (const auto& m : missing) std::cerr << "missing artifact: " << m << "\n";
      v.check("manifest-integrity", pass);
    }
  }
  return v.ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"heterogeneous test-question embedding toolkit"};
  app.require_subcommand(1);
  Cli cli;
  app.add_option("--config", cli.config_path, "experiment config JSON");
  app.add_option("--out", cli.out_override, "output root (overrides config and TQNET_OUT)");
  app.add_option("--corpus", cli.corpus_override, "corpus directory (default <out>/corpus)");
  app.add_flag("--force", cli.force, "rerun even if this configuration already ran");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic corpus");
  gen->fallthrough();

  std::string strategy, scope, fusion;
  auto* pre = app.add_subcommand("pretrain", "unsupervised pretraining");
  pre->fallthrough();
  pre->add_option("--strategy", strategy, "mlm | cl | mcl")
      ->check(CLI::IsMember({"mlm", "cl", "mcl"}));
  pre->add_option("--scope", scope, "uni | seq | cross")
      ->check(CLI::IsMember({"uni", "seq", "cross"}));
  pre->add_option("--fusion", fusion, "coordinated | joint")
      ->check(CLI::IsMember({"coordinated", "joint"}));

  std::string method, from;
  auto* ft = app.add_subcommand("finetune", "supervised fine-tuning");
  ft->fallthrough();
  ft->add_option("--method", method, "pair | scl")->check(CLI::IsMember({"pair", "scl"}));
  ft->add_option("--from", from, "starting checkpoint (omit for random init)");

  std::string task = "similar", subset = "all", eval_from;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->fallthrough();
  ev->add_option("--task", task, "similar | kp")->check(CLI::IsMember({"similar", "kp"}));
  ev->add_option("--subset", subset, "all | tt | ti | ii")
      ->check(CLI::IsMember({"all", "tt", "ti", "ii"}));
  ev->add_option("--from", eval_from, "checkpoint directory")->required();

  auto* ver = app.add_subcommand("verify", "run the fast invariant suite");
  ver->fallthrough();

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_data(cli);
    if (pre->parsed()) return cmd_pretrain(cli, strategy, scope, fusion);
    if (ft->parsed()) return cmd_finetune(cli, method, from);
    if (ev->parsed()) return cmd_eval(cli, task, subset, eval_from);
    if (ver->parsed()) return cmd_verify(cli);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IntegrityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
