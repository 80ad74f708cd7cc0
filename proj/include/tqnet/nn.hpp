#pragma once

#include <map>
#include <string>

#include "tqnet/tensor.hpp"

namespace tqnet::nn {

using ad::Mat;
using ad::Var;

// Named parameter tensors. Ordered map so iteration (and serialization,
// momentum updates, checkpoint hashes) is deterministic.
using Parameters = std::map<std::string, Var>;

inline Mat randn(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double std_dev) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = normal(rng) * std_dev;
  return m;
}

inline Var& param(Parameters& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw IntegrityError("missing parameter: " + name);
  return it->second;
}

inline const Var& param(const Parameters& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw IntegrityError("missing parameter: " + name);
  return it->second;
}

inline Parameters clone_params(const Parameters& src) {
  Parameters out;
  for (const auto& [name, v] : src) out.emplace(name, Var(v.value(), true));
  return out;
}

inline void zero_grads(Parameters& p) {
  for (auto& [name, v] : p) v.zero_grad();
}

// y = x W + b with W stored as (in x out)
inline Var linear(const Var& x, const Parameters& p, const std::string& prefix) {
  return ad::add_row(ad::matmul(x, param(p, prefix + ".w")), param(p, prefix + ".b"));
}

inline void add_linear(Parameters& p, const std::string& prefix, Eigen::Index in,
                       Eigen::Index out, std::mt19937_64& rng) {
  p.emplace(prefix + ".w", Var(randn(rng, in, out, 1.0 / std::sqrt(double(in))), true));
  p.emplace(prefix + ".b", Var(Mat::Zero(1, out), true));
}

// layer norm with learned gain/bias rows
inline Var layernorm(const Var& x, const Parameters& p, const std::string& prefix) {
  Var n = ad::layernorm_rows(x);
  return ad::add_row(ad::mul(n, ad::matmul(Var(Mat::Ones(x.rows(), 1)),
                                           param(p, prefix + ".g"))),
                     param(p, prefix + ".b"));
}

inline void add_layernorm(Parameters& p, const std::string& prefix, Eigen::Index d) {
  p.emplace(prefix + ".g", Var(Mat::Ones(1, d), true));
  p.emplace(prefix + ".b", Var(Mat::Zero(1, d), true));
}

struct SgdConfig {
  double lr = 3e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// SGD with classical momentum and decoupled-from-nothing L2 weight decay,
// the MoCo-family default.
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}

  void step(Parameters& p) {
    for (auto& [name, v] : p) {
      if (!v.requires_grad()) continue;
      Mat g = v.grad().size() ? Mat(v.grad()) : Mat(Mat::Zero(v.rows(), v.cols()));
      if (cfg_.weight_decay != 0.0) g += cfg_.weight_decay * v.value();
      auto it = velocity_.find(name);
      if (it == velocity_.end())
        it = velocity_.emplace(name, Mat(Mat::Zero(v.rows(), v.cols()))).first;
      it->second = cfg_.momentum * it->second + g;
      v.value() -= cfg_.lr * it->second;
    }
  }

  const SgdConfig& config() const { return cfg_; }

 private:
  SgdConfig cfg_;
  std::map<std::string, Mat> velocity_;
};

}  // namespace tqnet::nn
