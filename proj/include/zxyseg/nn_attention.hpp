#pragma once

// Multi-head scaled dot-product attention over the full voxel token set.
// q/k/v are [E, P] channel-major; every voxel is a token. The softmax
// matrices are recomputed in the backward pass instead of stored.

#include <cmath>
#include <limits>

#include "zxyseg/nn_basic.hpp"

namespace zxyseg::ad {

template <typename S>
struct AttentionStats {
  S min_row_sum = std::numeric_limits<S>::infinity();
  S max_row_sum = -std::numeric_limits<S>::infinity();
};

namespace detail {

// rowwise softmax of scores in place
template <typename S>
void softmax_rows(Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& m) {
  Eigen::Array<S, Eigen::Dynamic, 1> mx = m.rowwise().maxCoeff();
  m = (m.colwise() - mx.matrix()).array().exp().matrix();
  Eigen::Array<S, Eigen::Dynamic, 1> sum = m.rowwise().sum();
  m.array().colwise() /= sum;
}

}  // namespace detail

template <typename S>
Var multihead_attention(Tape<S>& tape, Var q, Var k, Var v, int heads,
                        AttentionStats<S>* stats = nullptr,
                        Tensor<S>* attn_head0 = nullptr) {
  const Tensor<S>& Q = tape.val(q);
  const Tensor<S>& K = tape.val(k);
  const Tensor<S>& V = tape.val(v);
  require(Q.shape == K.shape && Q.shape == V.shape, "ops.shape",
          "attention: q/k/v shapes must agree");
  const std::int64_t E = Q.shape[0];
  const std::int64_t P = spatial_size(Q);
  require(heads >= 1 && E % heads == 0, "ops.channels",
          "attention: heads must divide the channel width");
  const std::int64_t dh = E / heads;
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));

  using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Tensor<S> out = Tensor<S>::zeros(Q.shape);
  {
    MatRM attn(P, P);
    for (int h = 0; h < heads; ++h) {
      const auto qh = Q.mat(E, P).middleRows(h * dh, dh);
      const auto kh = K.mat(E, P).middleRows(h * dh, dh);
      const auto vh = V.mat(E, P).middleRows(h * dh, dh);
      attn.noalias() = qh.transpose() * kh;
      attn *= scale;
      detail::softmax_rows(attn);
      if (stats) {
        const auto sums = attn.rowwise().sum();
        stats->min_row_sum = std::min(stats->min_row_sum, sums.minCoeff());
        stats->max_row_sum = std::max(stats->max_row_sum, sums.maxCoeff());
      }
      if (attn_head0 && h == 0) {
        attn_head0->shape = {static_cast<int>(P), static_cast<int>(P)};
        attn_head0->data.resize(P * P);
        attn_head0->mat(P, P) = attn;
      }
      out.mat(E, P).middleRows(h * dh, dh).noalias() = vh * attn.transpose();
    }
  }

  const bool ng = tape.needs_grad(q) || tape.needs_grad(k) || tape.needs_grad(v);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [q, k, v, self, heads, E, P, dh, scale](Tape<S>& t) {
      const auto G = t.grad(self).mat(E, P);
      const auto Qm = t.val(q).mat(E, P);
      const auto Km = t.val(k).mat(E, P);
      const auto Vm = t.val(v).mat(E, P);
      MatRM attn(P, P), da(P, P);
      for (int h = 0; h < heads; ++h) {
        const auto qh = Qm.middleRows(h * dh, dh);
        const auto kh = Km.middleRows(h * dh, dh);
        const auto vh = Vm.middleRows(h * dh, dh);
        const auto gh = G.middleRows(h * dh, dh);
        attn.noalias() = qh.transpose() * kh;
        attn *= scale;
        detail::softmax_rows(attn);
        if (t.needs_grad(v))
          t.grad(v).mat(E, P).middleRows(h * dh, dh).noalias() += gh * attn;
        // dA then softmax backward (rowwise), scaled into raw-score gradient
        da.noalias() = gh.transpose() * vh;
        Eigen::Array<S, Eigen::Dynamic, 1> dot = (da.array() * attn.array()).rowwise().sum();
        da.array() = attn.array() * (da.array().colwise() - dot) * scale;
        if (t.needs_grad(q))
          t.grad(q).mat(E, P).middleRows(h * dh, dh).noalias() += kh * da.transpose();
        if (t.needs_grad(k)) t.grad(k).mat(E, P).middleRows(h * dh, dh).noalias() += qh * da;
      }
    });
  return self;
}

}  // namespace zxyseg::ad
