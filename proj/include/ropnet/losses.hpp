#pragma once

#include <array>

#include "ropnet/nn/autograd.hpp"

namespace ropnet {

// Class-weighted focal loss configuration. Alpha weights are indexed by
// broad class: severe false negatives cost 10x a normal one.
struct FocalConfig {
  double gamma_focus = 2.0;
  std::array<double, 4> alpha_weights{0.5, 1.0, 5.0, 1.0};  // normal, mild, severe, other
  double eps = 1e-8;  // probability clamp floor for the log
};

// Focal term from a probability vector: -alpha_t * (1 - p_t)^gamma * log(p_t).
inline nn::Var focal_loss_from_probs(const nn::Var& probs, int y, const FocalConfig& cfg) {
  require(y >= 0 && y < probs->value.dim(0), ErrorKind::InvalidParameter,
          "label out of range");
  nn::Var pt = nn::gather_scalar(probs, static_cast<size_t>(y));
  nn::Var one_minus = nn::add_const(nn::scale(pt, -1.0), 1.0);
  nn::Var focus = cfg.gamma_focus == 0.0 ? nn::add_const(nn::scale(pt, 0.0), 1.0)
                                         : nn::pow_const(one_minus, cfg.gamma_focus);
  nn::Var logp = nn::log_clamped(pt, cfg.eps);
  return nn::scale(nn::mul(focus, logp), -cfg.alpha_weights[static_cast<size_t>(y)]);
}

inline nn::Var focal_loss(const nn::Var& logits, int y, const FocalConfig& cfg) {
  return focal_loss_from_probs(nn::softmax_all(logits), y, cfg);
}

// Deep supervision: main focal term plus lambda-weighted auxiliary terms.
inline nn::Var deep_supervision_loss(const nn::Var& main_logits,
                                     const std::vector<nn::Var>& aux_logits, int y,
                                     double lambda, const FocalConfig& cfg) {
  nn::Var total = focal_loss(main_logits, y, cfg);
  if (lambda == 0.0 || aux_logits.empty()) return total;
  nn::Var aux_sum;
  for (const auto& aux : aux_logits) {
    nn::Var term = focal_loss(aux, y, cfg);
    aux_sum = aux_sum ? nn::add(aux_sum, term) : term;
  }
  return nn::add(total, nn::scale(aux_sum, lambda));
}

// Weighted binary cross-entropy on a logit, stabilized through softplus:
//   w_pos * y * softplus(-x) + (1 - y) * softplus(x).
inline nn::Var weighted_bce_logit(const nn::Var& logit, double y, double w_pos) {
  require(w_pos > 0.0, ErrorKind::InvalidParameter, "w_pos must be positive");
  nn::Var pos = nn::scale(nn::softplus(nn::scale(logit, -1.0)), w_pos * y);
  nn::Var neg = nn::scale(nn::softplus(logit), 1.0 - y);
  return nn::add(pos, neg);
}

inline nn::Var cross_entropy(const nn::Var& logits, int y, double eps = 1e-8) {
  nn::Var probs = nn::softmax_all(logits);
  return nn::scale(nn::log_clamped(nn::gather_scalar(probs, static_cast<size_t>(y)), eps), -1.0);
}

// Joint multi-task objective for the fusion stage: plain CE plus plain BCE,
// unweighted sum.
inline nn::Var joint_fusion_loss(const nn::Var& diag_logits, int y_diag,
                                 const nn::Var& plus_logit, double y_plus) {
  return nn::add(cross_entropy(diag_logits, y_diag),
                 weighted_bce_logit(plus_logit, y_plus, 1.0));
}

}  // namespace ropnet
