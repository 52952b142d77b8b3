#pragma once

// Tape-based reverse-mode differentiation over row-major matrices.
//
// Ops are recorded in creation order; Backward() walks the tape in reverse.
// Tokens of a batch are stored as consecutive rows: sample b, token t lives
// at row b * tokens_per_sample + t.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace excavate::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
  int id = -1;
};

template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;

  Var Constant(Mat value) { return {Push(std::move(value), false, {})}; }
  Var Parameter(Mat value) { return {Push(std::move(value), true, {})}; }

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  // Zero-sized until Backward reaches the node.
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }
  bool has_grad(Var v) const { return nodes_[v.id].grad.size() > 0; }
  std::size_t size() const { return nodes_.size(); }

  void Backward(Var scalar) {
    auto& root = nodes_[scalar.id];
    if (root.value.rows() != 1 || root.value.cols() != 1) {
      throw std::invalid_argument("Backward needs a 1x1 value");
    }
    G(scalar.id).setConstant(T(1));
    for (int i = scalar.id; i >= 0; --i) {
      if (nodes_[i].backward && nodes_[i].grad.size() > 0) nodes_[i].backward();
    }
  }

  // x[n, in] * w[in, out] + b[1, out]
  Var Linear(Var x, Var w, Var b) {
    const Mat& X = value(x);
    const Mat& W = value(w);
    const Mat& B = value(b);
    if (X.cols() != W.rows() || B.rows() != 1 || B.cols() != W.cols()) {
      throw std::invalid_argument("Linear: shape mismatch");
    }
    Mat y(X.rows(), W.cols());
    y.noalias() = X * W;
    y.rowwise() += B.row(0);
    const int out = Push(std::move(y), Needs(x, w, b), {});
    SetBackward(out, [this, out, x, w, b] {
      const Mat& dy = nodes_[out].grad;
      if (Tracks(x)) G(x.id).noalias() += dy * value(w).transpose();
      if (Tracks(w)) G(w.id).noalias() += value(x).transpose() * dy;
      if (Tracks(b)) G(b.id) += dy.colwise().sum();
    });
    return {out};
  }

  // a + b, where b may have fewer rows than a (tiled down the rows).
  Var Add(Var a, Var b) {
    const Mat& A = value(a);
    const Mat& Bv = value(b);
    if (A.cols() != Bv.cols() || Bv.rows() == 0 || A.rows() % Bv.rows() != 0) {
      throw std::invalid_argument("Add: shape mismatch");
    }
    Mat y = A;
    const Eigen::Index period = Bv.rows();
    for (Eigen::Index r0 = 0; r0 < A.rows(); r0 += period) y.middleRows(r0, period) += Bv;
    const int out = Push(std::move(y), Needs(a, b), {});
    SetBackward(out, [this, out, a, b, period] {
      const Mat& dy = nodes_[out].grad;
      if (Tracks(a)) G(a.id) += dy;
      if (Tracks(b)) {
        Mat& gb = G(b.id);
        for (Eigen::Index r0 = 0; r0 < dy.rows(); r0 += period) gb += dy.middleRows(r0, period);
      }
    });
    return {out};
  }

  // rows[t, d] repeated `times` times down the rows.
  Var Tile(Var rows, int times) {
    const Mat& R = value(rows);
    Mat y(R.rows() * times, R.cols());
    for (int i = 0; i < times; ++i) y.middleRows(i * R.rows(), R.rows()) = R;
    const int out = Push(std::move(y), Tracks(rows), {});
    SetBackward(out, [this, out, rows, times] {
      const Mat& dy = nodes_[out].grad;
      Mat& g = G(rows.id);
      const Eigen::Index t = g.rows();
      for (int i = 0; i < times; ++i) g += dy.middleRows(i * t, t);
    });
    return {out};
  }

  // Per-row normalization with gain/bias of shape [1, d].
  Var LayerNorm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Mat& X = value(x);
    const Mat& Gm = value(gamma);
    const Mat& Bt = value(beta);
    const Eigen::Index n = X.rows();
    const Eigen::Index d = X.cols();
    Mat xhat(n, d);
    std::vector<T> rstd(static_cast<std::size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
      const T mean = X.row(r).mean();
      const T var = (X.row(r).array() - mean).square().mean();
      const T inv = T(1) / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(r)] = inv;
      xhat.row(r) = (X.row(r).array() - mean) * inv;
    }
    Mat y(n, d);
    for (Eigen::Index r = 0; r < n; ++r) {
      y.row(r) = xhat.row(r).cwiseProduct(Gm.row(0)) + Bt.row(0);
    }
    const int out = Push(std::move(y), Needs(x, gamma, beta), {});
    SetBackward(out, [this, out, x, gamma, beta, xhat = std::move(xhat),
                      rstd = std::move(rstd)] {
      const Mat& dy = nodes_[out].grad;
      if (Tracks(gamma)) G(gamma.id) += dy.cwiseProduct(xhat).colwise().sum();
      if (Tracks(beta)) G(beta.id) += dy.colwise().sum();
      if (Tracks(x)) {
        Mat& gx = G(x.id);
        const auto& gm = value(gamma);
        for (Eigen::Index r = 0; r < dy.rows(); ++r) {
          const auto dxhat = (dy.row(r).cwiseProduct(gm.row(0))).eval();
          const T m1 = dxhat.mean();
          const T m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
          gx.row(r) += ((dxhat.array() - m1 - xhat.row(r).array() * m2) *
                        rstd[static_cast<std::size_t>(r)])
                           .matrix();
        }
      }
    });
    return {out};
  }

  // Tanh approximation of GELU.
  Var Gelu(Var x) {
    const Mat& X = value(x);
    constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
    constexpr double kA = 0.044715;
    Mat th(X.rows(), X.cols());
    Mat y(X.rows(), X.cols());
    for (Eigen::Index i = 0; i < X.size(); ++i) {
      const T v = X.data()[i];
      const T t = std::tanh(T(kC) * (v + T(kA) * v * v * v));
      th.data()[i] = t;
      y.data()[i] = T(0.5) * v * (T(1) + t);
    }
    const int out = Push(std::move(y), Tracks(x), {});
    SetBackward(out, [this, out, x, th = std::move(th)] {
      const Mat& dy = nodes_[out].grad;
      const Mat& X = value(x);
      Mat& gx = G(x.id);
      for (Eigen::Index i = 0; i < X.size(); ++i) {
        const T v = X.data()[i];
        const T t = th.data()[i];
        const T du = T(kC) * (T(1) + T(3 * kA) * v * v);
        gx.data()[i] += dy.data()[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
      }
    });
    return {out};
  }

  // Scaled dot-product attention over `heads` column groups, independently
  // per sample. key_valid (batch * tokens_k entries, or empty for all valid)
  // removes keys from the softmax entirely.
  Var Attention(Var q, Var k, Var v, int batch, int heads, std::vector<std::uint8_t> key_valid) {
    const Mat& Q = value(q);
    const Mat& K = value(k);
    const Mat& V = value(v);
    if (Q.cols() != K.cols() || K.cols() != V.cols() || K.rows() != V.rows() ||
        Q.rows() % batch != 0 || K.rows() % batch != 0 || Q.cols() % heads != 0) {
      throw std::invalid_argument("Attention: shape mismatch");
    }
    const Eigen::Index tq = Q.rows() / batch;
    const Eigen::Index tk = K.rows() / batch;
    const Eigen::Index dh = Q.cols() / heads;
    if (!key_valid.empty() && static_cast<Eigen::Index>(key_valid.size()) != K.rows()) {
      throw std::invalid_argument("Attention: key mask size mismatch");
    }
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Mat> probs(static_cast<std::size_t>(batch) * heads);
    Mat y(Q.rows(), Q.cols());
    Mat scores(tq, tk);
    for (int b = 0; b < batch; ++b) {
      const std::uint8_t* valid = key_valid.empty() ? nullptr : key_valid.data() + b * tk;
      for (int h = 0; h < heads; ++h) {
        scores.noalias() =
            Q.block(b * tq, h * dh, tq, dh) * K.block(b * tk, h * dh, tk, dh).transpose();
        Mat& P = probs[static_cast<std::size_t>(b) * heads + h];
        P.resize(tq, tk);
        for (Eigen::Index i = 0; i < tq; ++i) {
          T mx = -std::numeric_limits<T>::infinity();
          for (Eigen::Index j = 0; j < tk; ++j) {
            if (!valid || valid[j]) mx = std::max(mx, scores(i, j));
          }
          if (!std::isfinite(mx)) throw std::invalid_argument("Attention: no valid keys");
          T sum = T(0);
          for (Eigen::Index j = 0; j < tk; ++j) {
            const T e = (!valid || valid[j]) ? std::exp((scores(i, j) - mx) * scale) : T(0);
            P(i, j) = e;
            sum += e;
          }
          P.row(i) /= sum;
        }
        y.block(b * tq, h * dh, tq, dh).noalias() = P * V.block(b * tk, h * dh, tk, dh);
      }
    }
    const int out = Push(std::move(y), Needs(q, k, v), {});
    SetBackward(out, [this, out, q, k, v, batch, heads, tq, tk, dh, scale,
                      probs = std::move(probs)] {
      const Mat& dy = nodes_[out].grad;
      const Mat& Q = value(q);
      const Mat& K = value(k);
      const Mat& V = value(v);
      Mat* gq = Tracks(q) ? &G(q.id) : nullptr;
      Mat* gk = Tracks(k) ? &G(k.id) : nullptr;
      Mat* gv = Tracks(v) ? &G(v.id) : nullptr;
      Mat dp(tq, tk);
      Mat ds(tq, tk);
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
          const Mat& P = probs[static_cast<std::size_t>(b) * heads + h];
          const auto dout = dy.block(b * tq, h * dh, tq, dh);
          if (gv) gv->block(b * tk, h * dh, tk, dh).noalias() += P.transpose() * dout;
          if (!gq && !gk) continue;
          dp.noalias() = dout * V.block(b * tk, h * dh, tk, dh).transpose();
          for (Eigen::Index i = 0; i < tq; ++i) {
            const T dot = dp.row(i).dot(P.row(i));
            ds.row(i) = (P.row(i).array() * (dp.row(i).array() - dot)).matrix() * scale;
          }
          if (gq) gq->block(b * tq, h * dh, tq, dh).noalias() += ds * K.block(b * tk, h * dh, tk, dh);
          if (gk) {
            gk->block(b * tk, h * dh, tk, dh).noalias() +=
                ds.transpose() * Q.block(b * tq, h * dh, tq, dh);
          }
        }
      }
    });
    return {out};
  }

  // Interleaves per-sample token groups: output sample b holds parts[0]'s
  // rows for b, then parts[1]'s rows for b, and so on.
  Var StackTokens(const std::vector<Var>& parts, int batch) {
    if (parts.empty()) throw std::invalid_argument("StackTokens: no parts");
    const Eigen::Index d = value(parts[0]).cols();
    std::vector<Eigen::Index> per(parts.size());
    Eigen::Index total = 0;
    bool needs = false;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const Mat& P = value(parts[i]);
      if (P.cols() != d || P.rows() % batch != 0) {
        throw std::invalid_argument("StackTokens: shape mismatch");
      }
      per[i] = P.rows() / batch;
      total += per[i];
      needs = needs || Tracks(parts[i]);
    }
    Mat y(total * batch, d);
    for (int b = 0; b < batch; ++b) {
      Eigen::Index row = b * total;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        y.middleRows(row, per[i]) = value(parts[i]).middleRows(b * per[i], per[i]);
        row += per[i];
      }
    }
    const int out = Push(std::move(y), needs, {});
    SetBackward(out, [this, out, parts, per, total, batch] {
      const Mat& dy = nodes_[out].grad;
      for (int b = 0; b < batch; ++b) {
        Eigen::Index row = b * total;
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (Tracks(parts[i])) G(parts[i].id).middleRows(b * per[i], per[i]) += dy.middleRows(row, per[i]);
          row += per[i];
        }
      }
    });
    return {out};
  }

  Var SelectRows(Var x, std::vector<Eigen::Index> rows) {
    const Mat& X = value(x);
    Mat y(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) y.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
    const int out = Push(std::move(y), Tracks(x), {});
    SetBackward(out, [this, out, x, rows = std::move(rows)] {
      const Mat& dy = nodes_[out].grad;
      Mat& gx = G(x.id);
      for (std::size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += dy.row(static_cast<Eigen::Index>(i));
    });
    return {out};
  }

  Var SliceCols(Var x, Eigen::Index begin, Eigen::Index count) {
    const Mat& X = value(x);
    if (begin < 0 || begin + count > X.cols()) throw std::invalid_argument("SliceCols: range");
    Mat y = X.middleCols(begin, count);
    const int out = Push(std::move(y), Tracks(x), {});
    SetBackward(out, [this, out, x, begin, count] {
      G(x.id).middleCols(begin, count) += nodes_[out].grad;
    });
    return {out};
  }

  // Gradient passes only where lo < x < hi.
  Var Clamp(Var x, T lo, T hi) {
    const Mat& X = value(x);
    Mat y = X.cwiseMax(lo).cwiseMin(hi);
    const int out = Push(std::move(y), Tracks(x), {});
    SetBackward(out, [this, out, x, lo, hi] {
      const Mat& X = value(x);
      const Mat& dy = nodes_[out].grad;
      Mat& gx = G(x.id);
      for (Eigen::Index i = 0; i < X.size(); ++i) {
        if (X.data()[i] > lo && X.data()[i] < hi) gx.data()[i] += dy.data()[i];
      }
    });
    return {out};
  }

  // mu + exp(logvar / 2) * eps
  Var Reparameterize(Var mu, Var logvar, Mat eps) {
    const Mat& M = value(mu);
    const Mat& L = value(logvar);
    if (M.rows() != eps.rows() || M.cols() != eps.cols() || L.rows() != M.rows() ||
        L.cols() != M.cols()) {
      throw std::invalid_argument("Reparameterize: shape mismatch");
    }
    Mat sigma = (L.array() * T(0.5)).exp().matrix();
    Mat y = M + sigma.cwiseProduct(eps);
    const int out = Push(std::move(y), Needs(mu, logvar), {});
    SetBackward(out, [this, out, mu, logvar, eps = std::move(eps), sigma = std::move(sigma)] {
      const Mat& dy = nodes_[out].grad;
      if (Tracks(mu)) G(mu.id) += dy;
      if (Tracks(logvar)) {
        G(logvar.id) += (dy.array() * eps.array() * sigma.array() * T(0.5)).matrix();
      }
    });
    return {out};
  }

  // Mean absolute error over rows with row_valid != 0 (all columns).
  Var MaskedL1(Var pred, Mat target, std::vector<std::uint8_t> row_valid) {
    const Mat& P = value(pred);
    if (P.rows() != target.rows() || P.cols() != target.cols() ||
        static_cast<Eigen::Index>(row_valid.size()) != P.rows()) {
      throw std::invalid_argument("MaskedL1: shape mismatch");
    }
    Eigen::Index valid_rows = 0;
    T total = T(0);
    for (Eigen::Index r = 0; r < P.rows(); ++r) {
      if (!row_valid[static_cast<std::size_t>(r)]) continue;
      ++valid_rows;
      total += (P.row(r) - target.row(r)).cwiseAbs().sum();
    }
    if (valid_rows == 0) throw std::invalid_argument("MaskedL1: every row is masked");
    const T denom = static_cast<T>(valid_rows * P.cols());
    Mat y(1, 1);
    y(0, 0) = total / denom;
    const int out = Push(std::move(y), Tracks(pred), {});
    SetBackward(out, [this, out, pred, target = std::move(target), row_valid = std::move(row_valid),
                      denom] {
      const T g = nodes_[out].grad(0, 0) / denom;
      const Mat& P = value(pred);
      Mat& gp = G(pred.id);
      for (Eigen::Index r = 0; r < P.rows(); ++r) {
        if (!row_valid[static_cast<std::size_t>(r)]) continue;
        for (Eigen::Index c = 0; c < P.cols(); ++c) {
          const T diff = P(r, c) - target(r, c);
          gp(r, c) += diff > T(0) ? g : (diff < T(0) ? -g : T(0));
        }
      }
    });
    return {out};
  }

  // Mean over rows of 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar).
  Var KlDivergence(Var mu, Var logvar) {
    const Mat& M = value(mu);
    const Mat& L = value(logvar);
    const T rows = static_cast<T>(M.rows());
    Mat y(1, 1);
    y(0, 0) = T(0.5) * (M.array().square() + L.array().exp() - T(1) - L.array()).sum() / rows;
    const int out = Push(std::move(y), Needs(mu, logvar), {});
    SetBackward(out, [this, out, mu, logvar, rows] {
      const T g = nodes_[out].grad(0, 0) / rows;
      if (Tracks(mu)) G(mu.id) += value(mu) * g;
      if (Tracks(logvar)) {
        G(logvar.id) += ((value(logvar).array().exp() - T(1)) * (T(0.5) * g)).matrix();
      }
    });
    return {out};
  }

  // wa * a + wb * b for same-shaped a, b.
  Var WeightedSum(Var a, T wa, Var b, T wb) {
    const Mat& A = value(a);
    const Mat& Bv = value(b);
    if (A.rows() != Bv.rows() || A.cols() != Bv.cols()) {
      throw std::invalid_argument("WeightedSum: shape mismatch");
    }
    Mat y = A * wa + Bv * wb;
    const int out = Push(std::move(y), Needs(a, b), {});
    SetBackward(out, [this, out, a, wa, b, wb] {
      const Mat& dy = nodes_[out].grad;
      if (Tracks(a)) G(a.id) += dy * wa;
      if (Tracks(b)) G(b.id) += dy * wb;
    });
    return {out};
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  int Push(Mat value, bool requires_grad, std::function<void()> backward) {
    nodes_.push_back({std::move(value), Mat(), requires_grad, std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void SetBackward(int id, std::function<void()> fn) {
    if (nodes_[id].requires_grad) nodes_[id].backward = std::move(fn);
  }

  bool Tracks(Var v) const { return nodes_[v.id].requires_grad; }

  template <typename... Vars>
  bool Needs(Vars... vs) const {
    return (Tracks(vs) || ...);
  }

  Mat& G(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  std::vector<Node> nodes_;
};

}  // namespace excavate::ad
