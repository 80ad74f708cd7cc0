#pragma once

#include <fstream>

#include "tqnet/model.hpp"

namespace tqnet::checkpoint {

namespace fs = std::filesystem;
using json = nlohmann::json;
using nn::Parameters;

struct Checkpoint {
  model::ModelConfig config;
  Parameters params;
  std::string stage;        // "random" | "mlm" | "cl" | "finetune"
  std::string scope;        // "uni" | "seq" | "cross" | ""
  std::string fusion = "coordinated";
  std::string method;       // finetune method when stage == "finetune"
  std::string modality = "full";
  std::string parent;       // parent checkpoint id, "" for roots
  std::uint64_t vocab_hash = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> stage_chain;  // provenance, e.g. ["mlm","cl-uni"]

  std::string id() const {
    std::uint64_t h = splitmix64(vocab_hash ^ seed);
    for (const auto& [name, v] : params) {
      h = splitmix64(h ^ hash_str(name));
      const auto& m = v.value();
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        std::uint64_t bits;
        const double d = m(i);
        std::memcpy(&bits, &d, 8);
        h = splitmix64(h ^ bits);
      }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
    return buf;
  }
};

namespace detail {

inline json config_to_json(const model::ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_text_layers", c.n_text_layers},
              {"n_fusion_layers", c.n_fusion_layers},
              {"n_heads", c.n_heads},
              {"vocab_size", c.vocab_size},
              {"max_len", c.max_len},
              {"max_images", c.max_images},
              {"image_size", c.image_size},
              {"visual_channels", c.visual_channels},
              {"norm_style", model::norm_style_name(c.norm_style)}};
}

inline model::ModelConfig config_from_json(const json& j) {
  model::ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_text_layers = j.at("n_text_layers").get<int>();
  c.n_fusion_layers = j.at("n_fusion_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.max_images = j.at("max_images").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.visual_channels = j.at("visual_channels").get<std::vector<int>>();
  c.norm_style = model::norm_style_from(j.at("norm_style").get<std::string>());
  return c;
}

}  // namespace detail

inline void save(const fs::path& dir, const Checkpoint& ck) {
  fs::create_directories(dir);
  json m{{"config", detail::config_to_json(ck.config)},
         {"stage", ck.stage},
         {"scope", ck.scope},
         {"fusion", ck.fusion},
         {"method", ck.method},
         {"modality", ck.modality},
         {"parent", ck.parent},
         {"vocab_hash", ck.vocab_hash},
         {"seed", ck.seed},
         {"stage_chain", ck.stage_chain},
         {"id", ck.id()}};
  std::ofstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("cannot write checkpoint manifest");
  mf << m.dump(2) << "\n";

  std::ofstream pf(dir / "params.bin", std::ios::binary);
  if (!pf) throw FormatError("cannot write params.bin");
  const char magic[4] = {'T', 'Q', 'N', 'P'};
  pf.write(magic, 4);
  const std::uint64_t n = ck.params.size();
  pf.write(reinterpret_cast<const char*>(&n), 8);
  for (const auto& [name, v] : ck.params) {
    const std::uint64_t len = name.size();
    pf.write(reinterpret_cast<const char*>(&len), 8);
    pf.write(name.data(), std::streamsize(len));
    const std::uint64_t r = std::uint64_t(v.rows()), c = std::uint64_t(v.cols());
    pf.write(reinterpret_cast<const char*>(&r), 8);
    pf.write(reinterpret_cast<const char*>(&c), 8);
    pf.write(reinterpret_cast<const char*>(v.value().data()),
             std::streamsize(8 * v.value().size()));
  }
}

inline Checkpoint load(const fs::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw FormatError("missing checkpoint manifest in " + dir.string());
  json m = json::parse(mf);
  Checkpoint ck;
  ck.config = detail::config_from_json(m.at("config"));
  ck.stage = m.at("stage").get<std::string>();
  ck.scope = m.value("scope", "");
  ck.fusion = m.value("fusion", "coordinated");
  ck.method = m.value("method", "");
  ck.modality = m.value("modality", "full");
  ck.parent = m.value("parent", "");
  ck.vocab_hash = m.at("vocab_hash").get<std::uint64_t>();
  ck.seed = m.at("seed").get<std::uint64_t>();
  ck.stage_chain = m.value("stage_chain", std::vector<std::string>{});

  std::ifstream pf(dir / "params.bin", std::ios::binary);
  if (!pf) throw FormatError("missing params.bin in " + dir.string());
  char magic[4];
  pf.read(magic, 4);
  if (std::string(magic, 4) != "TQNP") throw FormatError("bad checkpoint magic");
  std::uint64_t n = 0;
  pf.read(reinterpret_cast<char*>(&n), 8);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint64_t len = 0, r = 0, c = 0;
    pf.read(reinterpret_cast<char*>(&len), 8);
    std::string name(len, '\0');
    pf.read(name.data(), std::streamsize(len));
    pf.read(reinterpret_cast<char*>(&r), 8);
    pf.read(reinterpret_cast<char*>(&c), 8);
    ad::Mat v = ad::Mat(Eigen::Index(r), Eigen::Index(c));
    pf.read(reinterpret_cast<char*>(v.data()), std::streamsize(8 * r * c));
    ck.params.emplace(name, ad::Var(std::move(v), true));
  }
  if (!pf) throw FormatError("truncated params.bin in " + dir.string());
  return ck;
}

}  // namespace tqnet::checkpoint
