#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tqnet/common.hpp"
#include "tqnet/image.hpp"

namespace tqnet::corpus {

namespace fs = std::filesystem;
using json = nlohmann::json;

// reserved token ids
inline constexpr int kPadId = 0;
inline constexpr int kMaskId = 1;
inline constexpr int kUnkId = 2;
inline constexpr int kNumReserved = 3;

inline constexpr int kMaxImages = 10;

enum class QType { choice, blank_filling, calculation };

inline std::string qtype_name(QType t) {
  switch (t) {
    case QType::choice: return "choice";
    case QType::blank_filling: return "blank";
    case QType::calculation: return "calc";
  }
  throw ArgumentError("bad qtype");
}

inline QType qtype_from(const std::string& s) {
  if (s == "choice") return QType::choice;
  if (s == "blank") return QType::blank_filling;
  if (s == "calc") return QType::calculation;
  throw FormatError("unknown qtype: " + s);
}

struct Question {
  std::string id;
  std::vector<std::string> text;    // whitespace-level tokens, formulas included
  std::vector<std::string> images;  // relative paths under the corpus root
  std::optional<int> kp_label;
  QType qtype = QType::choice;

  bool operator==(const Question&) const = default;
};

struct PairLabel {
  std::string a;
  std::string b;
  int label = 0;  // 1 = similar

  bool operator==(const PairLabel&) const = default;
};

// symmetric, irreflexive similarity map
class SimilarityGroundTruth {
 public:
  void add(const std::string& a, const std::string& b) {
    if (a == b) throw IntegrityError("self-pair in ground truth: " + a);
    map_[a].insert(b);
    map_[b].insert(a);
  }

  const std::set<std::string>& similars(const std::string& id) const {
    static const std::set<std::string> empty;
    auto it = map_.find(id);
    return it == map_.end() ? empty : it->second;
  }

  bool contains(const std::string& id) const { return map_.count(id) != 0; }
  std::size_t size() const { return map_.size(); }
  const std::map<std::string, std::set<std::string>>& raw() const { return map_; }

  bool operator==(const SimilarityGroundTruth&) const = default;

 private:
  std::map<std::string, std::set<std::string>> map_;
};

struct GroundTruthResult {
  SimilarityGroundTruth map;
  std::vector<PairLabel> negatives;  // label-0 pairs, kept for the pair baseline
};

inline GroundTruthResult ground_truth_map(const std::vector<PairLabel>& pairs) {
  GroundTruthResult out;
  for (const auto& p : pairs) {
    if (p.label != 0 && p.label != 1) throw ArgumentError("pair label must be 0 or 1");
    if (p.a == p.b) throw IntegrityError("self-pair: " + p.a);
    if (p.label == 1)
      out.map.add(p.a, p.b);
    else
      out.negatives.push_back(p);
  }
  return out;
}

struct GeneratorConfig {
  int n_questions = 2000;
  int n_kp = 20;
  double image_fraction = 0.30;
  int n_pairs_train = 3000;
  int n_pairs_test = 1200;
  int vocab_size = 400;
  int max_len = 32;
  std::uint64_t seed = 42;

  bool operator==(const GeneratorConfig&) const = default;
};

struct CorpusBundle {
  std::vector<Question> questions;
  std::vector<PairLabel> pairs_train;
  std::vector<PairLabel> pairs_test;
  GeneratorConfig config;  // echo; meaningful only for generated corpora
  fs::path root;           // image paths resolve against this

  bool operator==(const CorpusBundle& o) const {
    return questions == o.questions && pairs_train == o.pairs_train &&
           pairs_test == o.pairs_test && config == o.config;
  }

  const Question& by_id(const std::string& id) const {
    auto it = index().find(id);
    if (it == index().end()) throw IntegrityError("unknown question id: " + id);
    return questions[it->second];
  }

  bool has_id(const std::string& id) const { return index().count(id) != 0; }

  GroundTruthResult gt_train() const { return ground_truth_map(pairs_train); }
  GroundTruthResult gt_test() const { return ground_truth_map(pairs_test); }

  // test split = questions referenced by test pairs; train split = the rest
  std::vector<std::string> test_ids() const {
    std::set<std::string> s;
    for (const auto& p : pairs_test) {
      s.insert(p.a);
      s.insert(p.b);
    }
    return {s.begin(), s.end()};
  }

  std::vector<std::string> train_ids() const {
    const std::vector<std::string> t = test_ids();
    std::set<std::string> test(t.begin(), t.end());
    std::vector<std::string> out;
    for (const auto& q : questions)
      if (!test.count(q.id)) out.push_back(q.id);
    return out;
  }

 private:
  const std::map<std::string, std::size_t>& index() const {
    if (index_.size() != questions.size()) {
      index_.clear();
      for (std::size_t i = 0; i < questions.size(); ++i) index_[questions[i].id] = i;
    }
    return index_;
  }
  mutable std::map<std::string, std::size_t> index_;
};

class TokenVocab {
 public:
  TokenVocab() {
    add_reserved("<pad>", kPadId);
    add_reserved("<mask>", kMaskId);
    add_reserved("<unk>", kUnkId);
  }

  int add(const std::string& tok) {
    auto it = token_to_id_.find(tok);
    if (it != token_to_id_.end()) return it->second;
    const int id = int(id_to_token_.size());
    token_to_id_.emplace(tok, id);
    id_to_token_.push_back(tok);
    return id;
  }

  int to_id(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  const std::string& to_token(int id) const { return id_to_token_.at(std::size_t(id)); }
  int size() const { return int(id_to_token_.size()); }

  std::uint64_t content_hash() const {
    std::uint64_t h = 0x2545F4914F6CDD1DULL;
    for (std::size_t i = 0; i < id_to_token_.size(); ++i)
      h = splitmix64(h ^ hash_str(id_to_token_[i]) ^ i);
    return h;
  }

  bool operator==(const TokenVocab&) const = default;

 private:
  void add_reserved(const std::string& tok, int expect) {
    const int id = int(id_to_token_.size());
    if (id != expect) throw IntegrityError("reserved id layout broken");
    token_to_id_.emplace(tok, id);
    id_to_token_.push_back(tok);
  }

  std::map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// frequency desc, then lexicographic; tokens under min_freq fall to <unk>
inline TokenVocab build_vocab(const CorpusBundle& corpus, int min_freq = 1) {
  if (corpus.questions.empty()) throw ArgumentError("build_vocab: empty corpus");
  std::map<std::string, int> freq;
  for (const auto& q : corpus.questions)
    for (const auto& t : q.text) ++freq[t];
  std::vector<std::pair<std::string, int>> order(freq.begin(), freq.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  TokenVocab v;
  for (const auto& [tok, n] : order)
    if (n >= min_freq) v.add(tok);
  return v;
}

struct EncodedQuestion {
  std::string id;
  std::vector<int> token_ids;   // length max_len
  std::vector<double> mask;     // 1 = real token
  std::vector<img::Image> images;
  int n_real_tokens = 0;
};

inline EncodedQuestion encode_question(const Question& q, const TokenVocab& vocab,
                                       int max_len, const fs::path& image_root,
                                       int image_size = 0) {
  EncodedQuestion e;
  e.id = q.id;
  e.token_ids.assign(std::size_t(max_len), kPadId);
  e.mask.assign(std::size_t(max_len), 0.0);
  e.n_real_tokens = std::min<int>(max_len, int(q.text.size()));
  for (int i = 0; i < e.n_real_tokens; ++i) {
    e.token_ids[std::size_t(i)] = vocab.to_id(q.text[std::size_t(i)]);
    e.mask[std::size_t(i)] = 1.0;
  }
  for (const auto& rel : q.images) {
    img::Image im = img::read_png(image_root / rel);
    if (!im.data.allFinite()) throw DataError("non-finite pixels in " + rel);
    if (image_size > 0 && (im.h != image_size || im.w != image_size))
      im = img::resize(im, image_size, image_size);
    e.images.push_back(std::move(im));
  }
  return e;
}

namespace detail {

inline json question_to_json(const Question& q) {
  json j;
  j["id"] = q.id;
  j["text"] = q.text;
  j["images"] = q.images;
  j["kp"] = q.kp_label ? json(*q.kp_label) : json(nullptr);
  j["qtype"] = qtype_name(q.qtype);
  return j;
}

inline Question question_from_json(const json& j) {
  Question q;
  q.id = j.at("id").get<std::string>();
  q.text = j.at("text").get<std::vector<std::string>>();
  q.images = j.at("images").get<std::vector<std::string>>();
  if (!j.at("kp").is_null()) q.kp_label = j.at("kp").get<int>();
  q.qtype = qtype_from(j.at("qtype").get<std::string>());
  return q;
}

inline void write_pairs(const fs::path& path, const std::vector<PairLabel>& pairs) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot write " + path.string());
  for (const auto& p : pairs) {
    json j{{"a", p.a}, {"b", p.b}, {"label", p.label}};
    f << j.dump() << "\n";
  }
}

inline std::vector<PairLabel> read_pairs(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("missing file: " + path.string());
  std::vector<PairLabel> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw FormatError("bad JSON line in " + path.string());
    out.push_back({j.at("a").get<std::string>(), j.at("b").get<std::string>(),
                   j.at("label").get<int>()});
  }
  return out;
}

}  // namespace detail

inline void write_corpus(const fs::path& dir, const CorpusBundle& bundle) {
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "questions.jsonl");
    if (!f) throw FormatError("cannot write questions.jsonl");
    for (const auto& q : bundle.questions) f << detail::question_to_json(q).dump() << "\n";
  }
  detail::write_pairs(dir / "pairs_train.jsonl", bundle.pairs_train);
  detail::write_pairs(dir / "pairs_test.jsonl", bundle.pairs_test);
  json cfg{{"n_questions", bundle.config.n_questions},
           {"n_kp", bundle.config.n_kp},
           {"image_fraction", bundle.config.image_fraction},
           {"n_pairs_train", bundle.config.n_pairs_train},
           {"n_pairs_test", bundle.config.n_pairs_test},
           {"vocab_size", bundle.config.vocab_size},
           {"max_len", bundle.config.max_len},
           {"seed", bundle.config.seed}};
  std::ofstream f(dir / "generator.json");
  f << cfg.dump(2) << "\n";
}

inline CorpusBundle load_corpus(const fs::path& dir) {
  CorpusBundle b;
  b.root = dir;
  {
    std::ifstream f(dir / "questions.jsonl");
    if (!f) throw FormatError("missing file: " + (dir / "questions.jsonl").string());
    std::string line;
    std::set<std::string> seen;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) throw FormatError("bad JSON line in questions.jsonl");
      Question q = detail::question_from_json(j);
      if (!seen.insert(q.id).second) throw IntegrityError("duplicate question id: " + q.id);
      if (q.text.empty()) throw IntegrityError("empty text for question " + q.id);
      if (int(q.images.size()) > kMaxImages)
        throw IntegrityError("question " + q.id + " exceeds max image count");
      for (const auto& rel : q.images)
        if (!fs::exists(dir / rel))
          throw IntegrityError("missing image file: " + rel + " for " + q.id);
      b.questions.push_back(std::move(q));
    }
  }
  b.pairs_train = detail::read_pairs(dir / "pairs_train.jsonl");
  b.pairs_test = detail::read_pairs(dir / "pairs_test.jsonl");
  for (const auto* pairs : {&b.pairs_train, &b.pairs_test})
    for (const auto& p : *pairs) {
      if (!b.has_id(p.a)) throw IntegrityError("pair references unknown id: " + p.a);
      if (!b.has_id(p.b)) throw IntegrityError("pair references unknown id: " + p.b);
    }
  if (fs::exists(dir / "generator.json")) {
    std::ifstream f(dir / "generator.json");
    json j = json::parse(f);
    b.config.n_questions = j.value("n_questions", 0);
    b.config.n_kp = j.value("n_kp", 0);
    b.config.image_fraction = j.value("image_fraction", 0.0);
    b.config.n_pairs_train = j.value("n_pairs_train", 0);
    b.config.n_pairs_test = j.value("n_pairs_test", 0);
    b.config.vocab_size = j.value("vocab_size", 0);
    b.config.max_len = j.value("max_len", 0);
    b.config.seed = j.value("seed", std::uint64_t(0));
  }
  return b;
}

// ---------------------------------------------------------------------------
// synthetic generator

namespace detail {

// deterministic geometric figure keyed by (kp, template); per-question jitter
inline img::Image render_figure(int kp, int tmpl, std::mt19937_64& rng) {
  const int S = 32;
  img::Image im;
  im.h = S;
  im.w = S;
  const double bg = 0.85 + 0.1 * uniform(rng);
  im.data = ad::Mat::Constant(3, S * S, bg);

  const int n_shapes = 1 + tmpl % 3;
  const int shape_kind = kp % 4;
  // stable per-class hue
  const double hue[3] = {0.2 + 0.6 * ((kp * 7 + 3) % 11) / 10.0,
                         0.2 + 0.6 * ((kp * 5 + tmpl) % 11) / 10.0,
                         0.2 + 0.6 * ((tmpl * 13 + 5) % 11) / 10.0};
  for (int s = 0; s < n_shapes; ++s) {
    const int cx = int(uniform_int(rng, 8, S - 9));
    const int cy = int(uniform_int(rng, 8, S - 9));
    const int r = int(uniform_int(rng, 4, 7));
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const int dx = x - cx, dy = y - cy;
        bool inside = false;
        switch (shape_kind) {
          case 0: inside = dx * dx + dy * dy <= r * r; break;                  // disc
          case 1: inside = std::abs(dx) <= r && std::abs(dy) <= r; break;      // square
          case 2: inside = std::abs(dx) + std::abs(dy) <= r; break;            // diamond
          case 3: inside = std::abs(dx) <= 1 || std::abs(dy) <= 1; break;      // cross
        }
        if (inside)
          for (int c = 0; c < 3; ++c) im.data(c, y * S + x) = hue[c];
      }
  }
  return im;
}

}  // namespace detail

// Clustered corpus: each question belongs to a latent (kp, template) cluster;
// same-cluster questions are "similar". One cluster per kp is held out as the
// test cluster with enough members that every test question has >= 5 similars.
inline CorpusBundle generate_synthetic_corpus(const GeneratorConfig& cfg,
                                              const fs::path& out_dir) {
  if (cfg.n_questions <= 0 || cfg.n_kp <= 0) throw ArgumentError("generator: empty config");
  if (cfg.image_fraction < 0.0 || cfg.image_fraction > 1.0)
    throw ArgumentError("generator: image_fraction outside [0,1]");
  const int kTemplates = 3;
  const int kTestClusterSize = 8;  // 7 similars each, protocol needs >= 5
  const int n_clusters = cfg.n_kp * kTemplates;
  const int min_needed = cfg.n_kp * kTestClusterSize + cfg.n_kp * (kTemplates - 1) * 2;
  if (cfg.n_questions < min_needed)
    throw ArgumentError("generator: n_questions too small to give every test question 5 "
                        "similar questions (need >= " + std::to_string(min_needed) + ")");

  std::mt19937_64 rng(splitmix64(cfg.seed));

  // vocabulary pools
  const int n_function = 30;
  const int kp_pool = 10, tmpl_pool = 8;
  std::vector<std::string> function_words;
  for (int i = 0; i < n_function; ++i) function_words.push_back("w" + std::to_string(i));
  auto kp_tok = [](int kp, int j) { return "k" + std::to_string(kp) + "_" + std::to_string(j); };
  auto tmpl_tok = [](int kp, int t, int j) {
    return "t" + std::to_string(kp) + "_" + std::to_string(t) + "_" + std::to_string(j);
  };
  const int fixed_vocab = n_function + cfg.n_kp * kp_pool + n_clusters * tmpl_pool;
  const int n_noise = std::max(0, cfg.vocab_size - fixed_vocab);
  std::vector<std::string> noise_words;
  for (int i = 0; i < n_noise; ++i) noise_words.push_back("n" + std::to_string(i));

  // cluster membership: template 0 of every kp is the test cluster
  struct Slot { int kp, tmpl; };
  std::vector<Slot> slots;
  for (int kp = 0; kp < cfg.n_kp; ++kp)
    for (int i = 0; i < kTestClusterSize; ++i) slots.push_back({kp, 0});
  {
    int i = 0;
    while (int(slots.size()) < cfg.n_questions) {
      const int kp = i % cfg.n_kp;
      const int tmpl = 1 + (i / cfg.n_kp) % (kTemplates - 1);
      slots.push_back({kp, tmpl});
      ++i;
    }
  }

  CorpusBundle b;
  b.config = cfg;
  b.root = out_dir;
  fs::create_directories(out_dir / "images");

  std::vector<std::vector<std::string>> cluster_members;
  cluster_members.resize(std::size_t(n_clusters));
  int image_counter = 0;
  for (int qi = 0; qi < cfg.n_questions; ++qi) {
    const Slot s = slots[std::size_t(qi)];
    Question q;
    q.id = "q" + std::to_string(qi);
    q.kp_label = s.kp;
    q.qtype = QType(uniform_int(rng, 0, 2));
    cluster_members[std::size_t(s.kp * kTemplates + s.tmpl)].push_back(q.id);

    // text: template stem + kp words + a short filler tail; same-cluster
    // questions are near-paraphrases, so shared stem tokens dominate the
    // per-question filler noise
    std::vector<std::string> content;
    for (int j = 0; j < tmpl_pool; ++j)
      if (uniform(rng) < 0.9) content.push_back(tmpl_tok(s.kp, s.tmpl, j));
    for (int j = 0; j < 3; ++j)
      content.push_back(kp_tok(s.kp, int(uniform_int(rng, 0, kp_pool - 1))));
    const int n_filler = int(uniform_int(rng, 3, 6));
    for (int j = 0; j < n_filler; ++j) {
      if (!noise_words.empty() && uniform(rng) < 0.35)
        content.push_back(noise_words[std::size_t(uniform_int(rng, 0, n_noise - 1))]);
      else
        content.push_back(function_words[std::size_t(uniform_int(rng, 0, n_function - 1))]);
    }
    // deterministic shuffle
    for (int j = int(content.size()) - 1; j > 0; --j)
      std::swap(content[std::size_t(j)], content[std::size_t(uniform_int(rng, 0, j))]);
    q.text = std::move(content);

    if (uniform(rng) < cfg.image_fraction) {
      const int n_img = uniform(rng) < 0.8 ? 1 : int(uniform_int(rng, 2, 3));
      for (int j = 0; j < n_img; ++j) {
        img::Image im = detail::render_figure(s.kp, s.tmpl, rng);
        const std::string rel = "images/img" + std::to_string(image_counter++) + ".png";
        img::write_png(out_dir / rel, im);
        q.images.push_back(rel);
      }
    }
    b.questions.push_back(std::move(q));
  }

  // positive pairs: all within-cluster pairs; test clusters feed pairs_test
  auto all_pairs = [](const std::vector<std::string>& m) {
    std::vector<PairLabel> out;
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = i + 1; j < m.size(); ++j) out.push_back({m[i], m[j], 1});
    return out;
  };
  std::vector<PairLabel> pos_test, pos_train;
  for (int kp = 0; kp < cfg.n_kp; ++kp)
    for (int t = 0; t < kTemplates; ++t) {
      auto p = all_pairs(cluster_members[std::size_t(kp * kTemplates + t)]);
      auto& dst = (t == 0) ? pos_test : pos_train;
      dst.insert(dst.end(), p.begin(), p.end());
    }
  if (int(pos_test.size()) > cfg.n_pairs_test)
    throw ArgumentError("generator: n_pairs_test smaller than required positive pairs (" +
                        std::to_string(pos_test.size()) + ")");

  // negatives: cross-cluster pairs, test negatives drawn within the test pool
  std::set<std::string> test_pool;
  for (int kp = 0; kp < cfg.n_kp; ++kp)
    for (const auto& id : cluster_members[std::size_t(kp * kTemplates)]) test_pool.insert(id);
  auto cluster_of = [&](const std::string& id) {
    const int qi = std::stoi(id.substr(1));
    return slots[std::size_t(qi)].kp * kTemplates + slots[std::size_t(qi)].tmpl;
  };
  std::vector<std::string> test_vec(test_pool.begin(), test_pool.end());
  std::vector<std::string> train_vec;
  for (const auto& q : b.questions)
    if (!test_pool.count(q.id)) train_vec.push_back(q.id);

  auto draw_negatives = [&](const std::vector<std::string>& pool, int count) {
    std::vector<PairLabel> out;
    std::set<std::pair<std::string, std::string>> seen;
    int guard = 0;
    while (int(out.size()) < count && guard < count * 100) {
      ++guard;
      const auto& a = pool[std::size_t(uniform_int(rng, 0, int(pool.size()) - 1))];
      const auto& x = pool[std::size_t(uniform_int(rng, 0, int(pool.size()) - 1))];
      if (a == x || cluster_of(a) == cluster_of(x)) continue;
      auto key = a < x ? std::make_pair(a, x) : std::make_pair(x, a);
      if (!seen.insert(key).second) continue;
      out.push_back({key.first, key.second, 0});
    }
    return out;
  };
  auto neg_test = draw_negatives(test_vec, cfg.n_pairs_test - int(pos_test.size()));
  auto neg_train = draw_negatives(
      train_vec, std::max(0, cfg.n_pairs_train - int(pos_train.size())));
  if (int(pos_train.size()) > cfg.n_pairs_train) {
    // keep a deterministic prefix; train positives are plentiful by construction
    pos_train.resize(std::size_t(cfg.n_pairs_train));
  }

  b.pairs_test = pos_test;
  b.pairs_test.insert(b.pairs_test.end(), neg_test.begin(), neg_test.end());
  b.pairs_train = pos_train;
  b.pairs_train.insert(b.pairs_train.end(), neg_train.begin(), neg_train.end());

  write_corpus(out_dir, b);
  return b;
}

}  // namespace tqnet::corpus
