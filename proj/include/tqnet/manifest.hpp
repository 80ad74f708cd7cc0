#pragma once

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <fstream>

#include "tqnet/evaluate.hpp"

namespace tqnet::manifest {

namespace fs = std::filesystem;
using json = nlohmann::json;

// append-only run log; one JSON line per completed stage, guarded by an
// exclusive file lock so concurrent commands interleave safely
class RunManifest {
 public:
  explicit RunManifest(fs::path out_dir) : path_(out_dir / "manifest.jsonl") {
    fs::create_directories(out_dir);
  }

  void append(const std::string& stage, std::uint64_t config_hash,
              const std::vector<fs::path>& artifacts, double wall_seconds) {
    for (const auto& a : artifacts)
      if (!fs::exists(a))
        throw IntegrityError("manifest: artifact does not exist: " + a.string());
    json j{{"stage", stage},
           {"config_hash", config_hash},
           {"artifacts", json::array()},
           {"wall_seconds", wall_seconds},
           {"unix_time",
            std::chrono::duration_cast<std::chrono::seconds>(
                std::chrono::system_clock::now().time_since_epoch())
                .count()}};
    for (const auto& a : artifacts) j["artifacts"].push_back(a.string());
    locked_append(path_, j.dump() + "\n");
  }

  // every referenced artifact must still exist
  bool verify_integrity(std::vector<std::string>* missing = nullptr) const {
    std::ifstream f(path_);
    if (!f) return true;  // no runs yet
    std::string line;
    bool ok = true;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) {
        ok = false;
        if (missing) missing->push_back("(unparseable manifest line)");
        continue;
      }
      for (const auto& a : j.at("artifacts"))
        if (!fs::exists(a.get<std::string>())) {
          ok = false;
          if (missing) missing->push_back(a.get<std::string>());
        }
    }
    return ok;
  }

  bool has_config_hash(std::uint64_t h, const std::string& stage) const {
    std::ifstream f(path_);
    if (!f) return false;
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) continue;
      if (j.value("config_hash", std::uint64_t(0)) == h && j.value("stage", "") == stage)
        return true;
    }
    return false;
  }

  const fs::path& path() const { return path_; }

 private:
  static void locked_append(const fs::path& p, const std::string& text) {
    int fd = ::open(p.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) throw FormatError("manifest: cannot open " + p.string());
    ::flock(fd, LOCK_EX);
    [[maybe_unused]] auto n = ::write(fd, text.data(), text.size());
    ::flock(fd, LOCK_UN);
    ::close(fd);
  }

  fs::path path_;
};

// one CSV row per evaluation, for paper-style comparison tables
inline void append_experiment_row(const fs::path& out_dir, const evaluate::EvalReport& rep) {
  const fs::path csv = out_dir / "experiments.csv";
  const bool fresh = !fs::exists(csv);
  std::ofstream f(csv, std::ios::app);
  if (fresh) f << "task,subset,metric,value,k,n_queries,checkpoint_id,seed\n";
  for (const auto& [name, v] : rep.metrics)
    f << rep.task << "," << rep.subset << "," << name << "," << v << "," << rep.k << ","
      << rep.n_queries << "," << rep.checkpoint_id << "," << rep.seed << "\n";
}

}  // namespace tqnet::manifest
