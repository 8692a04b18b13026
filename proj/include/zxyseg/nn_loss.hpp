#pragma once

// Loss heads on the tape. Probabilities arrive channel-major [C, P];
// labels are one int per voxel.

#include <memory>
#include <vector>

#include "zxyseg/nn_basic.hpp"

namespace zxyseg::ad {

using LabelsPtr = std::shared_ptr<const std::vector<int>>;

// mean over voxels of -log(probs[label]); caller clamps probabilities away
// from zero beforehand
template <typename S>
Var nll_mean(Tape<S>& tape, Var probs, LabelsPtr labels) {
  const Tensor<S>& Pr = tape.val(probs);
  const std::int64_t c = Pr.shape[0];
  const std::int64_t p = spatial_size(Pr);
  require(static_cast<std::int64_t>(labels->size()) == p, "ops.shape",
          "nll: one label per voxel required");
  S acc = S(0);
  for (std::int64_t i = 0; i < p; ++i) {
    const int y = (*labels)[static_cast<size_t>(i)];
    require(y >= 0 && y < c, "ops.labels", "label outside class range");
    acc -= std::log(Pr.data[y * p + i]);
  }
  Tensor<S> out = Tensor<S>::full({1}, acc / static_cast<S>(p));
  const bool ng = tape.needs_grad(probs);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [probs, self, labels, p](Tape<S>& t) {
      const S go = t.grad(self).data[0];
      const auto& pr = t.val(probs).data;
      auto& g = t.grad(probs).data;
      const S inv_n = S(1) / static_cast<S>(p);
      for (std::int64_t i = 0; i < p; ++i) {
        const std::int64_t at = (*labels)[static_cast<size_t>(i)] * p + i;
        g[at] -= go * inv_n / pr[at];
      }
    });
  return self;
}

// 1 - mean over classes of (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps) with one-hot
// ground truth g. Optionally reports the per-class dice values.
template <typename S>
Var dice_loss_mean(Tape<S>& tape, Var probs, LabelsPtr labels, S eps = S(1e-5),
                   std::vector<S>* per_class_dice = nullptr) {
  const Tensor<S>& Pr = tape.val(probs);
  const std::int64_t c = Pr.shape[0];
  const std::int64_t p = spatial_size(Pr);
  require(static_cast<std::int64_t>(labels->size()) == p, "ops.shape",
          "dice: one label per voxel required");
  std::vector<S> inter(static_cast<size_t>(c), S(0));
  std::vector<S> denom(static_cast<size_t>(c), S(0));
  for (std::int64_t cl = 0; cl < c; ++cl) denom[static_cast<size_t>(cl)] = Pr.mat(c, p).row(cl).sum();
  for (std::int64_t i = 0; i < p; ++i) {
    const int y = (*labels)[static_cast<size_t>(i)];
    require(y >= 0 && y < c, "ops.labels", "label outside class range");
    inter[static_cast<size_t>(y)] += Pr.data[y * p + i];
    denom[static_cast<size_t>(y)] += S(1);
  }
  std::vector<S> dice(static_cast<size_t>(c));
  S mean_dice = S(0);
  for (std::int64_t cl = 0; cl < c; ++cl) {
    dice[static_cast<size_t>(cl)] =
        (S(2) * inter[static_cast<size_t>(cl)] + eps) / (denom[static_cast<size_t>(cl)] + eps);
    mean_dice += dice[static_cast<size_t>(cl)];
  }
  mean_dice /= static_cast<S>(c);
  if (per_class_dice) *per_class_dice = dice;

  Tensor<S> out = Tensor<S>::full({1}, S(1) - mean_dice);
  const bool ng = tape.needs_grad(probs);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [probs, self, labels, c, p, eps, dice, denom](Tape<S>& t) {
      const S go = t.grad(self).data[0];
      auto g = t.grad(probs).mat(c, p);
      const S inv_c = S(1) / static_cast<S>(c);
      for (std::int64_t cl = 0; cl < c; ++cl) {
        const S inv_b = S(1) / (denom[static_cast<size_t>(cl)] + eps);
        const S d = dice[static_cast<size_t>(cl)];
        // d(dice)/dp = (2*g_onehot - dice)/(denom+eps); loss = 1 - mean
        for (std::int64_t i = 0; i < p; ++i) {
          const S onehot = (*labels)[static_cast<size_t>(i)] == cl ? S(1) : S(0);
          g(cl, i) -= go * inv_c * (S(2) * onehot - d) * inv_b;
        }
      }
    });
  return self;
}

// mean over entries of exp(p_aux * log(p_main / p_aux)); equals exactly 1
// when the branches agree. Inputs are expected pre-clamped to [1e-7, 1].
template <typename S>
Var uncertainty_mean(Tape<S>& tape, Var p_main, Var p_aux) {
  const Tensor<S>& Pm = tape.val(p_main);
  const Tensor<S>& Pa = tape.val(p_aux);
  require(Pm.shape == Pa.shape, "ops.shape", "uncertainty: shape mismatch");
  const std::int64_t n = Pm.size();
  S acc = S(0);
  for (std::int64_t i = 0; i < n; ++i)
    acc += std::exp(Pa.data[i] * std::log(Pm.data[i] / Pa.data[i]));
  Tensor<S> out = Tensor<S>::full({1}, acc / static_cast<S>(n));
  const bool ng = tape.needs_grad(p_main) || tape.needs_grad(p_aux);
  Var self = tape.node(std::move(out), ng);
  if (ng)
    tape.set_backprop(self, [p_main, p_aux, self, n](Tape<S>& t) {
      const S go = t.grad(self).data[0] / static_cast<S>(n);
      const auto& pm = t.val(p_main).data;
      const auto& pa = t.val(p_aux).data;
      const bool nm = t.needs_grad(p_main);
      const bool na = t.needs_grad(p_aux);
      for (std::int64_t i = 0; i < n; ++i) {
        const S logratio = std::log(pm[i] / pa[i]);
        const S e = std::exp(pa[i] * logratio);
        if (nm) t.grad(p_main).data[i] += go * e * pa[i] / pm[i];
        if (na) t.grad(p_aux).data[i] += go * e * (logratio - S(1));
      }
    });
  return self;
}

}  // namespace zxyseg::ad
