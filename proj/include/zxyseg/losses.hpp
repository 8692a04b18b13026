#pragma once

// The three training losses and their unweighted sum. The uncertainty term
// is the literal per-entry form exp(p_aux * log(p_main / p_aux)) averaged
// over entries; it equals exactly 1 whenever the two branches agree. Note
// that as written the term decreases as p_main falls below p_aux, so on its
// own it does not reward agreement; it enters the total untouched, alongside
// CE and Dice. All-voxel reduction, no difficult-area masking.

#include <cstdint>
#include <vector>

#include "zxyseg/nn_loss.hpp"

namespace zxyseg {

inline constexpr double kProbFloor = 1e-7;

template <typename S>
struct LossBreakdownT {
  S ce = 0;
  S dice = 0;
  S un = 0;
  S total = 0;  // always the exact floating-point sum ce + dice + un
};

using LossBreakdown = LossBreakdownT<float>;

namespace detail {

inline ad::LabelsPtr to_label_ints(const std::vector<std::uint8_t>& labels) {
  auto v = std::make_shared<std::vector<int>>(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) (*v)[i] = labels[i];
  return v;
}

template <typename S>
void require_row_stochastic(const Tensor<S>& probs) {
  const std::int64_t c = probs.shape[0];
  const std::int64_t p = probs.size() / c;
  const auto m = probs.mat(c, p);
  for (std::int64_t i = 0; i < p; ++i)
    require(std::abs(m.col(i).sum() - S(1)) < S(1e-3), "losses.not_stochastic",
            "per-voxel class probabilities must sum to 1");
}

}  // namespace detail

// tape-side composition shared by training and the standalone wrappers;
// aux_logits may be invalid when the uncertainty term is disabled
template <typename S>
ad::Var total_loss_on_tape(ad::Tape<S>& tape, ad::Var main_logits, ad::Var aux_logits,
                           const std::vector<std::uint8_t>& labels, bool include_uncertainty,
                           LossBreakdownT<S>* breakdown = nullptr) {
  const auto y = detail::to_label_ints(labels);
  ad::Var p_main = ad::softmax_ch(tape, main_logits);
  ad::Var p_main_c = ad::clamp(tape, p_main, S(kProbFloor), S(1));
  ad::Var ce = ad::nll_mean(tape, p_main_c, y);
  ad::Var dice = ad::dice_loss_mean(tape, p_main, y, S(1e-5));
  ad::Var total;
  S un_value = S(0);
  if (include_uncertainty) {
    ad::Var p_aux = ad::softmax_ch(tape, aux_logits);
    ad::Var p_aux_c = ad::clamp(tape, p_aux, S(kProbFloor), S(1));
    ad::Var un = ad::uncertainty_mean(tape, p_main_c, p_aux_c);
    un_value = tape.val(un).data[0];
    total = ad::add(tape, ad::add(tape, ce, dice), un);
  } else {
    total = ad::add(tape, ce, dice);
  }
  if (breakdown) {
    breakdown->ce = tape.val(ce).data[0];
    breakdown->dice = tape.val(dice).data[0];
    breakdown->un = un_value;
    breakdown->total = breakdown->ce + breakdown->dice + breakdown->un;
  }
  return total;
}

// mean over voxels of -log softmax(main_logits)[true class], probabilities
// floored at 1e-7 before the log
template <typename S>
S cross_entropy_loss(const Tensor<S>& main_logits, const std::vector<std::uint8_t>& labels) {
  ad::Tape<S> tape;
  ad::Var logits = tape.input(main_logits);
  ad::Var probs = ad::clamp(tape, ad::softmax_ch(tape, logits), S(kProbFloor), S(1));
  return tape.val(ad::nll_mean(tape, probs, detail::to_label_ints(labels))).data[0];
}

// soft dice loss over all classes, eps = 1e-5
template <typename S>
S dice_loss(const Tensor<S>& p_main, const std::vector<std::uint8_t>& labels,
            std::vector<S>* per_class_dice = nullptr) {
  detail::require_row_stochastic(p_main);
  ad::Tape<S> tape;
  ad::Var probs = tape.input(p_main);
  return tape
      .val(ad::dice_loss_mean(tape, probs, detail::to_label_ints(labels), S(1e-5),
                              per_class_dice))
      .data[0];
}

// mean over entries of exp(p_aux * log(p_main / p_aux)), entries clamped to
// [1e-7, 1]. Evaluated per entry, so partial tensors are accepted.
template <typename S>
S uncertainty_loss(const Tensor<S>& p_main, const Tensor<S>& p_aux) {
  ad::Tape<S> tape;
  ad::Var pm = ad::clamp(tape, tape.input(p_main), S(kProbFloor), S(1));
  ad::Var pa = ad::clamp(tape, tape.input(p_aux), S(kProbFloor), S(1));
  return tape.val(ad::uncertainty_mean(tape, pm, pa)).data[0];
}

template <typename S>
LossBreakdownT<S> total_loss(const Tensor<S>& main_logits, const Tensor<S>& aux_logits,
                             const std::vector<std::uint8_t>& labels) {
  require(main_logits.shape == aux_logits.shape, "losses.shape",
          "main and aux logits must share a shape");
  ad::Tape<S> tape;
  LossBreakdownT<S> breakdown;
  total_loss_on_tape(tape, tape.input(main_logits), tape.input(aux_logits), labels, true,
                     &breakdown);
  return breakdown;
}

}  // namespace zxyseg
