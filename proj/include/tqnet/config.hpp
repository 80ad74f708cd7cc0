#pragma once

#include "tqnet/evaluate.hpp"
#include "tqnet/finetune.hpp"
#include "tqnet/pretrain.hpp"

namespace tqnet::config {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct EvalSettings {
  int k = 5;
  int kp_batch_size = 64;
  int kp_epochs = 40;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  fs::path out_dir = "runs";
  corpus::GeneratorConfig corpus;
  augment::AugmentConfig augment;
  model::ModelConfig model;
  pretrain::PretrainConfig pretrain;
  finetune::FinetuneConfig finetune;
  EvalSettings eval;
};

namespace detail {

inline void reject_unknown(const json& j, const std::string& section,
                           std::initializer_list<const char*> known) {
  for (const auto& [key, v] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok)
      throw FormatError("config: unknown key \"" + key + "\" in section \"" + section + "\"");
  }
}

template <typename T>
void get_to(const json& j, const char* key, T& dst) {
  if (j.contains(key)) j.at(key).get_to(dst);
}

inline void get_range(const json& j, const char* key, double& lo, double& hi) {
  if (!j.contains(key)) return;
  auto a = j.at(key);
  if (!a.is_array() || a.size() != 2) throw FormatError(std::string("config: ") + key + " must be [lo, hi]");
  lo = a[0].get<double>();
  hi = a[1].get<double>();
}

}  // namespace detail

inline ExperimentConfig parse(const json& j) {
  detail::reject_unknown(j, "(root)", {"seed", "out_dir", "corpus", "augment", "model",
                                       "pretrain", "finetune", "eval"});
  ExperimentConfig c;
  detail::get_to(j, "seed", c.seed);
  if (j.contains("out_dir")) c.out_dir = j.at("out_dir").get<std::string>();

  if (j.contains("corpus")) {
    const auto& s = j.at("corpus");
    detail::reject_unknown(s, "corpus",
                           {"n_questions", "n_kp", "image_fraction", "n_pairs_train",
                            "n_pairs_test", "vocab_size", "max_len", "seed"});
    detail::get_to(s, "n_questions", c.corpus.n_questions);
    detail::get_to(s, "n_kp", c.corpus.n_kp);
    detail::get_to(s, "image_fraction", c.corpus.image_fraction);
    detail::get_to(s, "n_pairs_train", c.corpus.n_pairs_train);
    detail::get_to(s, "n_pairs_test", c.corpus.n_pairs_test);
    detail::get_to(s, "vocab_size", c.corpus.vocab_size);
    detail::get_to(s, "max_len", c.corpus.max_len);
    c.corpus.seed = c.seed;
    detail::get_to(s, "seed", c.corpus.seed);
  } else {
    c.corpus.seed = c.seed;
  }

  if (j.contains("augment")) {
    const auto& s = j.at("augment");
    detail::reject_unknown(s, "augment",
                           {"mask_prob", "window_frac_range", "crop_scale_range", "flip_prob",
                            "jitter_strength", "blur_prob"});
    detail::get_to(s, "mask_prob", c.augment.mask_prob);
    detail::get_range(s, "window_frac_range", c.augment.window_lo, c.augment.window_hi);
    detail::get_range(s, "crop_scale_range", c.augment.crop_scale_lo, c.augment.crop_scale_hi);
    detail::get_to(s, "flip_prob", c.augment.flip_prob);
    detail::get_to(s, "jitter_strength", c.augment.jitter_strength);
    detail::get_to(s, "blur_prob", c.augment.blur_prob);
    c.augment.validate();
  }

  if (j.contains("model")) {
    const auto& s = j.at("model");
    detail::reject_unknown(s, "model",
                           {"d_model", "n_text_layers", "n_fusion_layers", "n_heads", "max_len",
                            "max_images", "image_size", "visual_channels", "norm_style"});
    detail::get_to(s, "d_model", c.model.d_model);
    detail::get_to(s, "n_text_layers", c.model.n_text_layers);
    detail::get_to(s, "n_fusion_layers", c.model.n_fusion_layers);
    detail::get_to(s, "n_heads", c.model.n_heads);
    detail::get_to(s, "max_len", c.model.max_len);
    detail::get_to(s, "max_images", c.model.max_images);
    detail::get_to(s, "image_size", c.model.image_size);
    detail::get_to(s, "visual_channels", c.model.visual_channels);
    if (s.contains("norm_style"))
      c.model.norm_style = model::norm_style_from(s.at("norm_style").get<std::string>());
  }
  c.model.max_len = std::min(c.model.max_len, c.corpus.max_len);

  if (j.contains("pretrain")) {
    const auto& s = j.at("pretrain");
    detail::reject_unknown(s, "pretrain",
                           {"strategy", "scope", "fusion", "tau", "m", "queue_size",
                            "batch_size", "steps", "lr", "seed", "n_virtual_devices",
                            "mask_prob"});
    if (s.contains("strategy"))
      c.pretrain.strategy = pretrain::strategy_from(s.at("strategy").get<std::string>());
    if (s.contains("scope"))
      c.pretrain.scope = pretrain::scope_from(s.at("scope").get<std::string>());
    if (s.contains("fusion"))
      c.pretrain.fusion = model::fusion_from(s.at("fusion").get<std::string>());
    detail::get_to(s, "tau", c.pretrain.tau);
    detail::get_to(s, "m", c.pretrain.m);
    detail::get_to(s, "queue_size", c.pretrain.queue_size);
    detail::get_to(s, "batch_size", c.pretrain.batch_size);
    detail::get_to(s, "steps", c.pretrain.steps);
    detail::get_to(s, "lr", c.pretrain.lr);
    c.pretrain.seed = c.seed;
    detail::get_to(s, "seed", c.pretrain.seed);
    detail::get_to(s, "n_virtual_devices", c.pretrain.n_virtual_devices);
    detail::get_to(s, "mask_prob", c.pretrain.mask_prob);
  } else {
    c.pretrain.seed = c.seed;
  }
  c.pretrain.augment = c.augment;

  if (j.contains("finetune")) {
    const auto& s = j.at("finetune");
    detail::reject_unknown(s, "finetune", {"method", "tau", "batch_size", "lr", "momentum",
                                           "weight_decay", "epochs", "seed"});
    if (s.contains("method"))
      c.finetune.method = finetune::method_from(s.at("method").get<std::string>());
    detail::get_to(s, "tau", c.finetune.tau);
    detail::get_to(s, "batch_size", c.finetune.batch_size);
    detail::get_to(s, "lr", c.finetune.lr);
    detail::get_to(s, "momentum", c.finetune.momentum);
    detail::get_to(s, "weight_decay", c.finetune.weight_decay);
    detail::get_to(s, "epochs", c.finetune.epochs);
    c.finetune.seed = c.seed;
    detail::get_to(s, "seed", c.finetune.seed);
  } else {
    c.finetune.seed = c.seed;
  }

  if (j.contains("eval")) {
    const auto& s = j.at("eval");
    detail::reject_unknown(s, "eval", {"k", "kp_batch_size", "kp_epochs"});
    detail::get_to(s, "k", c.eval.k);
    detail::get_to(s, "kp_batch_size", c.eval.kp_batch_size);
    detail::get_to(s, "kp_epochs", c.eval.kp_epochs);
  }
  return c;
}

inline ExperimentConfig load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("config: cannot open " + path.string());
  json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw FormatError("config: invalid JSON in " + path.string());
  return parse(j);
}

inline std::uint64_t config_hash(const json& j) { return hash_str(j.dump()); }

}  // namespace tqnet::config
