#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "tqnet/common.hpp"

namespace tqnet::ad {

using Mat = Eigen::MatrixXd;

struct Node {
  Mat value;
  Mat grad;  // allocated lazily on first contribution
  bool requires_grad = false;
  std::function<void()> backprop;  // empty for leaves

  void accumulate(const Mat& g) {
    if (!requires_grad) return;
    if (grad.size() == 0)
      grad = g;
    else
      grad += g;
  }
  bool has_grad() const { return grad.size() != 0; }
};

// Shared handle to a node. Copies alias the same storage.
class Var {
 public:
  Var() = default;
  explicit Var(Mat v, bool requires_grad = false) : n_(std::make_shared<Node>()) {
    n_->value = std::move(v);
    n_->requires_grad = requires_grad;
  }

  const Mat& value() const { return n_->value; }
  Mat& value() { return n_->value; }
  const Mat& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  void zero_grad() { n_->grad.resize(0, 0); }
  std::shared_ptr<Node> node() const { return n_; }
  bool valid() const { return n_ != nullptr; }
  Eigen::Index rows() const { return n_->value.rows(); }
  Eigen::Index cols() const { return n_->value.cols(); }
  double scalar() const { return n_->value(0, 0); }

 private:
  std::shared_ptr<Node> n_;
};

// Records op outputs in creation order; backward replays in reverse.
// One tape per forward pass; no tape active means pure inference.
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() {
    // backprop closures capture node handles (including their own), so they
    // must be dropped here or the graph would keep itself alive
    for (auto& n : nodes_) n->backprop = nullptr;
    active_ = prev_;
  }
  Tape(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(const std::shared_ptr<Node>& n) { nodes_.push_back(n); }

  void backward(const Var& loss) {
    loss.node()->grad = Mat::Ones(loss.rows(), loss.cols());
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if ((*it)->has_grad() && (*it)->backprop) (*it)->backprop();
    }
  }

 private:
  std::vector<std::shared_ptr<Node>> nodes_;
  Tape* prev_;
  static inline thread_local Tape* active_ = nullptr;
};

namespace detail {

inline Var make_op(Mat value, bool requires_grad, std::function<void()> backprop) {
  Tape* t = Tape::active();
  Var out(std::move(value), requires_grad && t != nullptr);
  if (out.requires_grad()) {
    out.node()->backprop = std::move(backprop);
    t->record(out.node());
  }
  return out;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ArgumentError("matmul: inner dimensions differ");
  auto an = a.node(), bn = b.node();
  Mat v = an->value * bn->value;
  Var out = detail::make_op(std::move(v), a.requires_grad() || b.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, bn, on]() {
      if (an->requires_grad) an->accumulate(on->grad * bn->value.transpose());
      if (bn->requires_grad) bn->accumulate(an->value.transpose() * on->grad);
    };
  }
  return out;
}

inline Var add(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  Var out = detail::make_op(an->value + bn->value,
                            a.requires_grad() || b.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, bn, on]() {
      an->accumulate(on->grad);
      bn->accumulate(on->grad);
    };
  }
  return out;
}

inline Var sub(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  Var out = detail::make_op(an->value - bn->value,
                            a.requires_grad() || b.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, bn, on]() {
      an->accumulate(on->grad);
      bn->accumulate(-on->grad);
    };
  }
  return out;
}

inline Var mul(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  Var out = detail::make_op(an->value.cwiseProduct(bn->value),
                            a.requires_grad() || b.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, bn, on]() {
      an->accumulate(on->grad.cwiseProduct(bn->value));
      bn->accumulate(on->grad.cwiseProduct(an->value));
    };
  }
  return out;
}

inline Var scale(const Var& a, double c) {
  auto an = a.node();
  Var out = detail::make_op(an->value * c, a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on, c]() { an->accumulate(on->grad * c); };
  }
  return out;
}

// constant offset, e.g. attention masks
inline Var add_const(const Var& a, const Mat& c) {
  auto an = a.node();
  Var out = detail::make_op(an->value + c, a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on]() { an->accumulate(on->grad); };
  }
  return out;
}

// broadcast a 1xD row over every row of a
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ArgumentError("add_row: shape mismatch");
  auto an = a.node(), rn = row.node();
  Var out = detail::make_op(an->value.rowwise() + rn->value.row(0),
                            a.requires_grad() || row.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, rn, on]() {
      an->accumulate(on->grad);
      rn->accumulate(on->grad.colwise().sum());
    };
  }
  return out;
}

// per-row affine over channels: y = diag(g) * x + b * 1^T, g/b are Cx1
inline Var col_affine(const Var& x, const Var& g, const Var& b) {
  if (g.rows() != x.rows() || b.rows() != x.rows())
    throw ArgumentError("col_affine: channel count mismatch");
  auto xn = x.node(), gn = g.node(), bn = b.node();
  Mat v = xn->value.array().colwise() * gn->value.col(0).array();
  v.colwise() += bn->value.col(0);
  Var out = detail::make_op(std::move(v),
                            x.requires_grad() || g.requires_grad() || b.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [xn, gn, bn, on]() {
      xn->accumulate(on->grad.array().colwise() * gn->value.col(0).array());
      gn->accumulate(on->grad.cwiseProduct(xn->value).rowwise().sum());
      bn->accumulate(on->grad.rowwise().sum());
    };
  }
  return out;
}

inline Var gelu(const Var& a) {
  auto an = a.node();
  Mat v = an->value.unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
  });
  Var out = detail::make_op(std::move(v), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on]() {
      Mat d = an->value.unaryExpr([](double x) {
        const double phi = std::exp(-0.5 * x * x) * 0.3989422804014327;
        return 0.5 * (1.0 + std::erf(x * 0.7071067811865476)) + x * phi;
      });
      an->accumulate(on->grad.cwiseProduct(d));
    };
  }
  return out;
}

inline Var sigmoid(const Var& a) {
  auto an = a.node();
  Mat v = 1.0 / (1.0 + (-an->value.array()).exp());
  Var out = detail::make_op(std::move(v), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on]() {
      const auto y = on->value.array();
      an->accumulate(on->grad.cwiseProduct(Mat(y * (1.0 - y))));
    };
  }
  return out;
}

inline Var abs(const Var& a) {
  auto an = a.node();
  Var out = detail::make_op(an->value.cwiseAbs(), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on]() {
      an->accumulate(on->grad.cwiseProduct(Mat(an->value.array().sign())));
    };
  }
  return out;
}

inline Var softmax_rows(const Var& a) {
  auto an = a.node();
  Mat v = an->value;
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double m = v.row(i).maxCoeff();
    v.row(i) = (v.row(i).array() - m).exp();
    v.row(i) /= v.row(i).sum();
  }
  Var out = detail::make_op(std::move(v), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on]() {
      Mat g(on->grad.rows(), on->grad.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const double dot = on->grad.row(i).dot(on->value.row(i));
        g.row(i) = on->value.row(i).cwiseProduct(
            Mat(on->grad.row(i).array() - dot));
      }
      an->accumulate(g);
    };
  }
  return out;
}

// row-normalize to zero mean, unit variance (no affine)
inline Var layernorm_rows(const Var& a, double eps = 1e-5) {
  auto an = a.node();
  const Eigen::Index R = a.rows(), C = a.cols();
  Mat v(R, C);
  Eigen::VectorXd inv_std(R);
  for (Eigen::Index i = 0; i < R; ++i) {
    const double mean = an->value.row(i).mean();
    Mat c = an->value.row(i).array() - mean;
    const double var = c.array().square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    v.row(i) = c * inv_std(i);
  }
  Var out = detail::make_op(std::move(v), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on, inv_std, C]() {
      Mat g(on->grad.rows(), on->grad.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const auto y = on->value.row(i).array();
        const auto go = on->grad.row(i).array();
        const double gmean = go.mean();
        const double gy = (go * y).mean();
        g.row(i) = inv_std(i) * (go - gmean - y * gy);
      }
      an->accumulate(g);
    };
  }
  return out;
}

inline Var l2_normalize_rows(const Var& a, double eps = 1e-12) {
  auto an = a.node();
  const Eigen::Index R = a.rows();
  Mat v(R, a.cols());
  Eigen::VectorXd inv_norm(R);
  for (Eigen::Index i = 0; i < R; ++i) {
    inv_norm(i) = 1.0 / std::max(an->value.row(i).norm(), eps);
    v.row(i) = an->value.row(i) * inv_norm(i);
  }
  Var out = detail::make_op(std::move(v), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on, inv_norm]() {
      Mat g(on->grad.rows(), on->grad.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        const double dot = on->grad.row(i).dot(on->value.row(i));
        g.row(i) = inv_norm(i) * (on->grad.row(i) - dot * on->value.row(i));
      }
      an->accumulate(g);
    };
  }
  return out;
}

inline Var transpose(const Var& a) {
  auto an = a.node();
  Var out = detail::make_op(an->value.transpose(), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on]() { an->accumulate(on->grad.transpose()); };
  }
  return out;
}

inline Var slice_rows(const Var& a, Eigen::Index r0, Eigen::Index nr) {
  auto an = a.node();
  Var out = detail::make_op(an->value.middleRows(r0, nr), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on, r0, nr]() {
      Mat g = Mat::Zero(an->value.rows(), an->value.cols());
      g.middleRows(r0, nr) = on->grad;
      an->accumulate(g);
    };
  }
  return out;
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: empty input");
  Eigen::Index R = 0;
  const Eigen::Index C = parts[0].cols();
  bool rg = false;
  for (const auto& p : parts) {
    R += p.rows();
    rg = rg || p.requires_grad();
  }
  Mat v(R, C);
  Eigen::Index r = 0;
  std::vector<std::shared_ptr<Node>> ns;
  ns.reserve(parts.size());
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    ns.push_back(p.node());
  }
  Var out = detail::make_op(std::move(v), rg, {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [ns, on]() {
      Eigen::Index r = 0;
      for (const auto& n : ns) {
        n->accumulate(on->grad.middleRows(r, n->value.rows()));
        r += n->value.rows();
      }
    };
  }
  return out;
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: empty input");
  const Eigen::Index R = parts[0].rows();
  Eigen::Index C = 0;
  bool rg = false;
  for (const auto& p : parts) {
    C += p.cols();
    rg = rg || p.requires_grad();
  }
  Mat v(R, C);
  Eigen::Index c = 0;
  std::vector<std::shared_ptr<Node>> ns;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
    ns.push_back(p.node());
  }
  Var out = detail::make_op(std::move(v), rg, {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [ns, on]() {
      Eigen::Index c = 0;
      for (const auto& n : ns) {
        n->accumulate(on->grad.middleCols(c, n->value.cols()));
        c += n->value.cols();
      }
    };
  }
  return out;
}

inline Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index nc) {
  auto an = a.node();
  Var out = detail::make_op(an->value.middleCols(c0, nc), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on, c0, nc]() {
      Mat g = Mat::Zero(an->value.rows(), an->value.cols());
      g.middleCols(c0, nc) = on->grad;
      an->accumulate(g);
    };
  }
  return out;
}

// gather rows of an embedding table; backward scatter-adds
inline Var gather_rows(const Var& table, const std::vector<int>& ids) {
  auto tn = table.node();
  for (int id : ids)
    if (id < 0 || id >= table.rows())
      throw ArgumentError("gather_rows: id out of range");
  Mat v(Eigen::Index(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) v.row(Eigen::Index(i)) = tn->value.row(ids[i]);
  Var out = detail::make_op(std::move(v), table.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [tn, on, ids]() {
      Mat g = Mat::Zero(tn->value.rows(), tn->value.cols());
      for (std::size_t i = 0; i < ids.size(); ++i)
        g.row(ids[i]) += on->grad.row(Eigen::Index(i));
      tn->accumulate(g);
    };
  }
  return out;
}

// vertically repeat a matrix; backward sums the tiles
inline Var tile_rows(const Var& a, Eigen::Index times) {
  auto an = a.node();
  const Eigen::Index R = a.rows();
  Mat v(R * times, a.cols());
  for (Eigen::Index t = 0; t < times; ++t) v.middleRows(t * R, R) = an->value;
  Var out = detail::make_op(std::move(v), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on, R, times]() {
      Mat g = Mat::Zero(R, an->value.cols());
      for (Eigen::Index t = 0; t < times; ++t) g += on->grad.middleRows(t * R, R);
      an->accumulate(g);
    };
  }
  return out;
}

inline Var sum(const Var& a) {
  auto an = a.node();
  Mat v(1, 1);
  v(0, 0) = an->value.sum();
  Var out = detail::make_op(std::move(v), a.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [an, on]() {
      an->accumulate(Mat::Constant(an->value.rows(), an->value.cols(), on->grad(0, 0)));
    };
  }
  return out;
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / double(a.rows() * a.cols())); }

// weighted mean cross-entropy over rows of a logits matrix; targets per row,
// rows with weight 0 are ignored. Backward is (softmax - onehot) * w / sum(w).
inline Var ce_rows(const Var& logits, const std::vector<int>& targets,
                   const std::vector<double>& weights) {
  auto ln = logits.node();
  const Eigen::Index R = logits.rows();
  if (Eigen::Index(targets.size()) != R || Eigen::Index(weights.size()) != R)
    throw ArgumentError("ce_rows: row count mismatch");
  double wsum = 0.0, loss = 0.0;
  Mat sm(R, logits.cols());
  for (Eigen::Index i = 0; i < R; ++i) {
    const double m = ln->value.row(i).maxCoeff();
    sm.row(i) = (ln->value.row(i).array() - m).exp();
    const double z = sm.row(i).sum();
    sm.row(i) /= z;
    if (weights[i] > 0.0) {
      loss += weights[i] * (std::log(z) + m - ln->value(i, targets[i]));
      wsum += weights[i];
    }
  }
  if (wsum <= 0.0) throw ArgumentError("ce_rows: no weighted rows");
  Mat v(1, 1);
  v(0, 0) = loss / wsum;
  Var out = detail::make_op(std::move(v), logits.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [ln, on, sm, targets, weights, wsum]() {
      Mat g = Mat::Zero(ln->value.rows(), ln->value.cols());
      for (Eigen::Index i = 0; i < g.rows(); ++i) {
        if (weights[i] <= 0.0) continue;
        g.row(i) = sm.row(i) * (weights[i] / wsum);
        g(i, targets[i]) -= weights[i] / wsum;
      }
      ln->accumulate(g * on->grad(0, 0));
    };
  }
  return out;
}

namespace detail {

// x: (C, H*W) row-major pixels per channel -> patches (C*k*k, Ho*Wo)
inline Mat im2col(const Mat& x, int H, int W, int k, int stride, int pad, int Ho, int Wo) {
  const int C = int(x.rows());
  Mat p = Mat::Zero(C * k * k, Ho * Wo);
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      const int col = oy * Wo + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= W) continue;
          for (int c = 0; c < C; ++c)
            p((c * k + ky) * k + kx, col) = x(c, iy * W + ix);
        }
      }
    }
  return p;
}

inline Mat col2im(const Mat& p, int C, int H, int W, int k, int stride, int pad, int Ho,
                  int Wo) {
  Mat x = Mat::Zero(C, H * W);
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      const int col = oy * Wo + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * stride + kx - pad;
          if (ix < 0 || ix >= W) continue;
          for (int c = 0; c < C; ++c)
            x(c, iy * W + ix) += p((c * k + ky) * k + kx, col);
        }
      }
    }
  return x;
}

}  // namespace detail

// x (C, H*W), w (Cout, C*k*k), b (Cout, 1) -> (Cout, Ho*Wo)
inline Var conv2d(const Var& x, const Var& w, const Var& b, int H, int W, int k, int stride,
                  int pad) {
  const int C = int(x.rows());
  if (w.cols() != Eigen::Index(C) * k * k) throw ArgumentError("conv2d: weight shape mismatch");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  auto xn = x.node(), wn = w.node(), bn = b.node();
  Mat patches = detail::im2col(xn->value, H, W, k, stride, pad, Ho, Wo);
  Mat v = wn->value * patches;
  v.colwise() += bn->value.col(0);
  Var out = detail::make_op(std::move(v),
                            x.requires_grad() || w.requires_grad() || b.requires_grad(), {});
  if (out.requires_grad()) {
    auto on = out.node();
    on->backprop = [xn, wn, bn, on, patches, C, H, W, k, stride, pad, Ho, Wo]() {
      if (wn->requires_grad) wn->accumulate(on->grad * patches.transpose());
      if (bn->requires_grad) bn->accumulate(on->grad.rowwise().sum());
      if (xn->requires_grad) {
        Mat gp = wn->value.transpose() * on->grad;
        xn->accumulate(detail::col2im(gp, C, H, W, k, stride, pad, Ho, Wo));
      }
    };
  }
  return out;
}

}  // namespace tqnet::ad
