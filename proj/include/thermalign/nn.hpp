#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "thermalign/common.hpp"
#include "thermalign/rng.hpp"

// Minimal transformer building blocks with explicit backward passes.
// Everything is templated on the scalar: the pipeline runs float for speed,
// while gradient-check and oracle tests instantiate double.
//
// Convention: activations are (sequence, features) matrices; layers cache
// whatever their backward needs during forward, so a layer instance serves
// one forward/backward pair at a time and is not shareable across threads.
//
// Backward passes propagate input gradients unconditionally but accumulate
// parameter gradients only into trainable tensors; frozen weights skip those
// GEMMs entirely, which is most of the saving when only the projector trains.

namespace thermalign {

struct ShapeError : Error {
  using Error::Error;
};

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

template <class S>
struct Tensor {
  std::string name;
  bool trainable = false;
  Mat<S> w, g;

  void setup(std::string n, int rows, int cols, bool train) {
    name = std::move(n);
    trainable = train;
    w = Mat<S>::Zero(rows, cols);
    g = Mat<S>::Zero(rows, cols);
  }
  void init_normal(Rng& rng, double stddev) {
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        w(i, j) = static_cast<S>(rng.normal(0.0, stddev));
  }
  void fill(S v) { w.setConstant(v); }
  std::uint64_t count() const { return static_cast<std::uint64_t>(w.size()); }
  void zero_grad() { g.setZero(); }
  std::uint64_t digest() const {
    return fnv1a64(w.data(), sizeof(S) * static_cast<std::size_t>(w.size()));
  }
};

template <class S>
struct Linear {
  Tensor<S> W;  // in x out
  Tensor<S> b;  // 1 x out
  Mat<S> x_;

  void setup(const std::string& prefix, int in, int out, Rng& rng, double wstd) {
    W.setup(prefix + ".w", in, out, false);
    b.setup(prefix + ".b", 1, out, false);
    W.init_normal(rng, wstd);
  }
  Mat<S> fwd(const Mat<S>& x) {
    x_ = x;
    Mat<S> y = x * W.w;
    y.rowwise() += b.w.row(0);
    return y;
  }
  Mat<S> bwd(const Mat<S>& dy) {
    if (W.trainable) W.g.noalias() += x_.transpose() * dy;
    if (b.trainable) b.g.row(0) += dy.colwise().sum();
    return dy * W.w.transpose();
  }
  void collect(std::vector<Tensor<S>*>& out) {
    out.push_back(&W);
    out.push_back(&b);
  }
};

template <class S>
struct LayerNorm {
  Tensor<S> gamma, beta;
  Mat<S> xhat_;
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std_;

  static constexpr double kEps = 1e-5;

  void setup(const std::string& prefix, int d) {
    gamma.setup(prefix + ".g", 1, d, false);
    beta.setup(prefix + ".b", 1, d, false);
    gamma.fill(S(1));
  }
  Mat<S> fwd(const Mat<S>& x) {
    Eigen::Matrix<S, Eigen::Dynamic, 1> mean = x.rowwise().mean();
    Mat<S> center = x;
    center.colwise() -= mean;
    Eigen::Matrix<S, Eigen::Dynamic, 1> var =
        center.array().square().rowwise().mean().matrix();
    inv_std_ = (var.array() + S(kEps)).rsqrt().matrix();
    xhat_ = (center.array().colwise() * inv_std_.array()).matrix();
    Mat<S> y = (xhat_.array().rowwise() * gamma.w.row(0).array()).matrix();
    y.rowwise() += beta.w.row(0);
    return y;
  }
  Mat<S> bwd(const Mat<S>& dy) {
    const auto d = dy.cols();
    if (gamma.trainable)
      gamma.g.row(0) += (dy.array() * xhat_.array()).colwise().sum().matrix();
    if (beta.trainable) beta.g.row(0) += dy.colwise().sum();
    Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> dxhat =
        dy.array().rowwise() * gamma.w.row(0).array();
    Eigen::Array<S, Eigen::Dynamic, 1> s1 = dxhat.rowwise().sum();
    Eigen::Array<S, Eigen::Dynamic, 1> s2 = (dxhat * xhat_.array()).rowwise().sum();
    Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> dx =
        (dxhat * S(d)).colwise() - s1;
    dx -= xhat_.array().colwise() * s2;
    dx = dx.colwise() * (inv_std_.array() / S(d));
    return dx.matrix();
  }
  void collect(std::vector<Tensor<S>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

template <class S>
struct Gelu {
  Mat<S> x_;
  static double value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }
  static double slope(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
  }
  Mat<S> fwd(const Mat<S>& x) {
    x_ = x;
    return x.unaryExpr([](S v) { return static_cast<S>(value(static_cast<double>(v))); });
  }
  Mat<S> bwd(const Mat<S>& dy) {
    Mat<S> dx =
        x_.unaryExpr([](S v) { return static_cast<S>(slope(static_cast<double>(v))); });
    return dx.cwiseProduct(dy);
  }
};

// Multi-head self-attention, strictly causal: position i attends to j <= i.
template <class S>
struct SelfAttention {
  int d = 0, heads = 0;
  Linear<S> q, k, v, o;
  Mat<S> Q_, K_, V_;
  std::vector<Mat<S>> A_;  // per-head attention weights, lower-triangular

  void setup(const std::string& prefix, int dim, int n_heads, Rng& rng, double wstd) {
    if (dim % n_heads != 0)
      throw ShapeError("attention width " + std::to_string(dim) +
                       " not divisible by " + std::to_string(n_heads) + " heads");
    d = dim;
    heads = n_heads;
    q.setup(prefix + ".q", d, d, rng, wstd);
    k.setup(prefix + ".k", d, d, rng, wstd);
    v.setup(prefix + ".v", d, d, rng, wstd);
    o.setup(prefix + ".o", d, d, rng, wstd);
  }

  Mat<S> fwd(const Mat<S>& x) {
    const Eigen::Index T = x.rows();
    const int dh = d / heads;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    Q_ = q.fwd(x);
    K_ = k.fwd(x);
    V_ = v.fwd(x);
    A_.assign(static_cast<std::size_t>(heads), Mat<S>());
    Mat<S> concat(T, d);
    for (int h = 0; h < heads; ++h) {
      auto Qh = Q_.middleCols(h * dh, dh);
      auto Kh = K_.middleCols(h * dh, dh);
      auto Vh = V_.middleCols(h * dh, dh);
      Mat<S> scores = (Qh * Kh.transpose()) * scale;
      Mat<S> A = Mat<S>::Zero(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        auto row = scores.row(i).head(i + 1);
        const S m = row.maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (row.array() - m).exp();
        A.row(i).head(i + 1) = (e / e.sum()).matrix();
      }
      concat.middleCols(h * dh, dh).noalias() = A * Vh;
      A_[static_cast<std::size_t>(h)] = std::move(A);
    }
    return o.fwd(concat);
  }

  Mat<S> bwd(const Mat<S>& dy) {
    const Eigen::Index T = dy.rows();
    const int dh = d / heads;
    const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    Mat<S> dconcat = o.bwd(dy);
    Mat<S> dQ = Mat<S>::Zero(T, d), dK = Mat<S>::Zero(T, d), dV = Mat<S>::Zero(T, d);
    for (int h = 0; h < heads; ++h) {
      const Mat<S>& A = A_[static_cast<std::size_t>(h)];
      auto Vh = V_.middleCols(h * dh, dh);
      auto Qh = Q_.middleCols(h * dh, dh);
      auto Kh = K_.middleCols(h * dh, dh);
      auto dOh = dconcat.middleCols(h * dh, dh);
      Mat<S> dA = dOh * Vh.transpose();
      dV.middleCols(h * dh, dh).noalias() = A.transpose() * dOh;
      // softmax backward, row-wise; A is zero above the diagonal so dS is too.
      Eigen::Array<S, Eigen::Dynamic, 1> r =
          (A.array() * dA.array()).rowwise().sum();
      Mat<S> dS = (A.array() * (dA.array().colwise() - r)).matrix();
      dQ.middleCols(h * dh, dh).noalias() = dS * Kh * scale;
      dK.middleCols(h * dh, dh).noalias() = dS.transpose() * Qh * scale;
    }
    Mat<S> dx = q.bwd(dQ);
    dx += k.bwd(dK);
    dx += v.bwd(dV);
    return dx;
  }

  void collect(std::vector<Tensor<S>*>& out) {
    q.collect(out);
    k.collect(out);
    v.collect(out);
    o.collect(out);
  }
};

// Pre-norm transformer block: x + attn(ln1(x)), then a + mlp(ln2(a)).
template <class S>
struct Block {
  LayerNorm<S> ln1, ln2;
  SelfAttention<S> attn;
  Linear<S> fc1, fc2;
  Gelu<S> act;

  void setup(const std::string& prefix, int d, int heads, int ff, Rng& rng, double wstd) {
    ln1.setup(prefix + ".ln1", d);
    ln2.setup(prefix + ".ln2", d);
    attn.setup(prefix + ".attn", d, heads, rng, wstd);
    fc1.setup(prefix + ".mlp.fc1", d, ff, rng, wstd);
    fc2.setup(prefix + ".mlp.fc2", ff, d, rng, wstd);
  }
  Mat<S> fwd(const Mat<S>& x) {
    Mat<S> a = x + attn.fwd(ln1.fwd(x));
    return a + fc2.fwd(act.fwd(fc1.fwd(ln2.fwd(a))));
  }
  Mat<S> bwd(const Mat<S>& dy) {
    Mat<S> da = dy + ln2.bwd(fc1.bwd(act.bwd(fc2.bwd(dy))));
    return da + ln1.bwd(attn.bwd(da));
  }
  void collect(std::vector<Tensor<S>*>& out) {
    ln1.collect(out);
    attn.collect(out);
    ln2.collect(out);
    fc1.collect(out);
    fc2.collect(out);
  }
};

}  // namespace thermalign
