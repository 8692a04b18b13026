#pragma once

// Elementwise, channel-mixing, and normalization primitives on the autodiff
// tape. Feature tensors are [C, ...spatial] viewed as row-major C x P
// matrices with one row per channel.

#include "zxyseg/autodiff.hpp"

namespace zxyseg::ad {

template <typename S>
std::int64_t spatial_size(const Tensor<S>& t) {
  require(!t.shape.empty(), "ops.shape", "expected a channel-major tensor");
  return t.size() / t.shape[0];
}

template <typename S>
Var add(Tape<S>& tape, Var a, Var b) {
  const Tensor<S>& A = tape.val(a);
  const Tensor<S>& B = tape.val(b);
  require(A.shape == B.shape, "ops.shape", "add: shape mismatch");
  Tensor<S> out;
  out.shape = A.shape;
  out.data = A.data + B.data;
  const bool ng = tape.needs_grad(a) || tape.needs_grad(b);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [a, b, self](Tape<S>& t) {
      const auto& g = t.grad(self).data;
      if (t.needs_grad(a)) t.grad(a).data += g;
      if (t.needs_grad(b)) t.grad(b).data += g;
    });
  return self;
}

template <typename S>
Var leaky_relu(Tape<S>& tape, Var x, S alpha) {
  const Tensor<S>& X = tape.val(x);
  Tensor<S> out;
  out.shape = X.shape;
  out.data = (X.data >= S(0)).select(X.data, X.data * alpha);
  const bool ng = tape.needs_grad(x);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [x, self, alpha](Tape<S>& t) {
      const auto& g = t.grad(self).data;
      const auto& xv = t.val(x).data;
      t.grad(x).data += (xv >= S(0)).select(g, g * alpha);
    });
  return self;
}

// clamp with pass-through gradient strictly inside (lo, hi)
template <typename S>
Var clamp(Tape<S>& tape, Var x, S lo, S hi) {
  const Tensor<S>& X = tape.val(x);
  Tensor<S> out;
  out.shape = X.shape;
  out.data = X.data.min(hi).max(lo);
  const bool ng = tape.needs_grad(x);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [x, self, lo, hi](Tape<S>& t) {
      const auto& g = t.grad(self).data;
      const auto& xv = t.val(x).data;
      t.grad(x).data += (xv > lo && xv < hi).select(g, Eigen::Array<S, Eigen::Dynamic, 1>::Zero(g.size()));
    });
  return self;
}

template <typename S>
Var concat_ch(Tape<S>& tape, Var a, Var b) {
  const Tensor<S>& A = tape.val(a);
  const Tensor<S>& B = tape.val(b);
  require(A.shape.size() == B.shape.size() && A.shape.size() >= 2, "ops.shape",
          "concat_ch: rank mismatch");
  for (size_t i = 1; i < A.shape.size(); ++i)
    require(A.shape[i] == B.shape[i], "ops.shape", "concat_ch: spatial shape mismatch");
  Tensor<S> out;
  out.shape = A.shape;
  out.shape[0] += B.shape[0];
  out.data.resize(A.size() + B.size());
  out.data.head(A.size()) = A.data;
  out.data.tail(B.size()) = B.data;
  const bool ng = tape.needs_grad(a) || tape.needs_grad(b);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [a, b, self](Tape<S>& t) {
      const auto& g = t.grad(self).data;
      const std::int64_t na = t.val(a).size();
      if (t.needs_grad(a)) t.grad(a).data += g.head(na);
      if (t.needs_grad(b)) t.grad(b).data += g.tail(g.size() - na);
    });
  return self;
}

// 1x1x1 convolution / channel projection: out = W x + b with W [Co, Ci]
// (any W tensor whose element count is Co*Ci works, e.g. [Co, Ci, 1, 1, 1]).
template <typename S>
Var linear_ch(Tape<S>& tape, Var x, Var w, Var b) {
  const Tensor<S>& X = tape.val(x);
  const Tensor<S>& W = tape.val(w);
  const Tensor<S>& B = tape.val(b);
  const std::int64_t ci = X.shape[0];
  const std::int64_t p = spatial_size(X);
  const std::int64_t co = B.size();
  require(W.size() == co * ci, "ops.channels",
          "linear_ch: weight holds " + std::to_string(W.size()) + " values, expected " +
              std::to_string(co) + "x" + std::to_string(ci));
  Tensor<S> out;
  out.shape = X.shape;
  out.shape[0] = static_cast<int>(co);
  out.data.resize(co * p);
  out.mat(co, p).noalias() = W.mat(co, ci) * X.mat(ci, p);
  out.mat(co, p).colwise() += B.data.matrix();
  const bool ng = tape.needs_grad(x) || tape.needs_grad(w) || tape.needs_grad(b);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [x, w, b, self, ci, co, p](Tape<S>& t) {
      const auto g = t.grad(self).mat(co, p);
      if (t.needs_grad(x)) t.grad(x).mat(ci, p).noalias() += t.val(w).mat(co, ci).transpose() * g;
      if (t.needs_grad(w))
        t.grad(w).mat(co, ci).noalias() += g * t.val(x).mat(ci, p).transpose();
      if (t.needs_grad(b)) t.grad(b).data.matrix() += g.rowwise().sum();
    });
  return self;
}

// softmax over the channel axis, per voxel
template <typename S>
Var softmax_ch(Tape<S>& tape, Var x) {
  const Tensor<S>& X = tape.val(x);
  const std::int64_t c = X.shape[0];
  const std::int64_t p = spatial_size(X);
  Tensor<S> out;
  out.shape = X.shape;
  out.data.resize(X.size());
  {
    auto xm = X.mat(c, p);
    auto om = out.mat(c, p);
    om = (xm.rowwise() - xm.colwise().maxCoeff()).array().exp().matrix();
    om.array().rowwise() /= om.colwise().sum().array();
  }
  const bool ng = tape.needs_grad(x);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [x, self, c, p](Tape<S>& t) {
      const auto y = t.val(self).mat(c, p);
      const auto g = t.grad(self).mat(c, p);
      Eigen::Matrix<S, 1, Eigen::Dynamic> dot = (g.array() * y.array()).colwise().sum();
      t.grad(x).mat(c, p).array() += y.array() * (g.array().rowwise() - dot.array());
    });
  return self;
}

// instance normalization: per-channel mean/variance over the spatial axis
template <typename S>
Var instance_norm(Tape<S>& tape, Var x, Var gamma, Var beta, S eps = S(1e-5)) {
  const Tensor<S>& X = tape.val(x);
  const std::int64_t c = X.shape[0];
  const std::int64_t p = spatial_size(X);
  require(tape.val(gamma).size() == c && tape.val(beta).size() == c, "ops.channels",
          "instance_norm: gamma/beta must have one entry per channel");
  Tensor<S> out;
  out.shape = X.shape;
  out.data.resize(X.size());
  Eigen::Array<S, Eigen::Dynamic, 1> inv_sigma(c);
  {
    auto xm = X.mat(c, p);
    auto om = out.mat(c, p);
    for (std::int64_t i = 0; i < c; ++i) {
      const S mu = xm.row(i).mean();
      const S var = (xm.row(i).array() - mu).square().mean();
      inv_sigma[i] = S(1) / std::sqrt(var + eps);
      om.row(i) = ((xm.row(i).array() - mu) * inv_sigma[i] * tape.val(gamma).data[i] +
                   tape.val(beta).data[i])
                      .matrix();
    }
  }
  const bool ng = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [x, gamma, beta, self, c, p, inv_sigma](Tape<S>& t) {
      const auto xm = t.val(x).mat(c, p);
      const auto g = t.grad(self).mat(c, p);
      const auto& gam = t.val(gamma).data;
      for (std::int64_t i = 0; i < c; ++i) {
        const S mu = xm.row(i).mean();
        Eigen::Array<S, 1, Eigen::Dynamic> xhat = (xm.row(i).array() - mu) * inv_sigma[i];
        const auto gi = g.row(i).array();
        if (t.needs_grad(gamma)) t.grad(gamma).data[i] += (gi * xhat).sum();
        if (t.needs_grad(beta)) t.grad(beta).data[i] += gi.sum();
        if (t.needs_grad(x)) {
          Eigen::Array<S, 1, Eigen::Dynamic> dxhat = gi * gam[i];
          const S m1 = dxhat.mean();
          const S m2 = (dxhat * xhat).mean();
          t.grad(x).mat(c, p).row(i).array() += inv_sigma[i] * (dxhat - m1 - xhat * m2);
        }
      }
    });
  return self;
}

// layer normalization across channels, per voxel
template <typename S>
Var layer_norm_ch(Tape<S>& tape, Var x, Var gamma, Var beta, S eps = S(1e-5)) {
  const Tensor<S>& X = tape.val(x);
  const std::int64_t c = X.shape[0];
  const std::int64_t p = spatial_size(X);
  require(tape.val(gamma).size() == c && tape.val(beta).size() == c, "ops.channels",
          "layer_norm: gamma/beta must have one entry per channel");
  Tensor<S> out;
  out.shape = X.shape;
  out.data.resize(X.size());
  Tensor<S> inv_sigma = Tensor<S>::zeros({static_cast<int>(p)});
  {
    auto xm = X.mat(c, p);
    auto om = out.mat(c, p);
    Eigen::Array<S, 1, Eigen::Dynamic> mu = xm.colwise().mean();
    Eigen::Array<S, 1, Eigen::Dynamic> var =
        (xm.array().rowwise() - mu).square().colwise().mean();
    inv_sigma.data = (var + eps).sqrt().inverse().transpose();
    om = (((xm.array().rowwise() - mu).rowwise() * inv_sigma.data.transpose()).colwise() *
              tape.val(gamma).data +
          tape.val(beta).data.replicate(1, p).array())
             .matrix();
  }
  const bool ng = tape.needs_grad(x) || tape.needs_grad(gamma) || tape.needs_grad(beta);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [x, gamma, beta, self, c, p, inv_sigma](Tape<S>& t) {
      const auto xm = t.val(x).mat(c, p);
      const auto g = t.grad(self).mat(c, p);
      const auto& gam = t.val(gamma).data;
      Eigen::Array<S, 1, Eigen::Dynamic> mu = xm.colwise().mean();
      Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> xhat =
          (xm.array().rowwise() - mu).rowwise() * inv_sigma.data.transpose();
      if (t.needs_grad(gamma))
        t.grad(gamma).data += (g.array() * xhat).rowwise().sum();
      if (t.needs_grad(beta)) t.grad(beta).data += g.array().rowwise().sum();
      if (t.needs_grad(x)) {
        Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic> dxhat = g.array().colwise() * gam;
        Eigen::Array<S, 1, Eigen::Dynamic> m1 = dxhat.colwise().mean();
        Eigen::Array<S, 1, Eigen::Dynamic> m2 = (dxhat * xhat).colwise().mean();
        t.grad(x).mat(c, p).array() +=
            ((dxhat.rowwise() - m1) - (xhat.rowwise() * m2)).rowwise() *
            inv_sigma.data.transpose();
      }
    });
  return self;
}

}  // namespace zxyseg::ad
