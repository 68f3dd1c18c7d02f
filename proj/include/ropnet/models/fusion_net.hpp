#pragma once

#include <array>

#include "ropnet/nn/modules.hpp"

namespace ropnet {

// Fusion vector layout is fixed: (structure logits[4], texture logit,
// clinical vector[3]) -> R^8, raw values passed through unchanged.
inline std::array<double, 8> build_fusion_vector(const std::array<double, 4>& l_struct,
                                                 double l_tex,
                                                 const std::array<double, 3>& x_tab) {
  return {l_struct[0], l_struct[1], l_struct[2], l_struct[3], l_tex,
          x_tab[0], x_tab[1], x_tab[2]};
}

// Stacked meta-learner: one rectified hidden layer, then a softmax head for
// the 4-class diagnosis and a sigmoid head for plus disease.
struct FusionConfig {
  int in_dim = 8;
  int hidden = 32;
};

struct FusionOutput {
  nn::Var diag_logits;  // [4]
  nn::Var diag_probs;   // [4], softmax
  nn::Var plus_logit;   // [1]
  nn::Var plus_prob;    // [1], sigmoid
};

class FusionNet {
 public:
  FusionNet(nn::ParamStore& ps, const FusionConfig& cfg, Rng& rng) : cfg_(cfg) {
    l1_ = nn::LinearLayer::make(ps, "fusion.fc", "head", cfg.in_dim, cfg.hidden, rng);
    diag_ = nn::LinearLayer::make(ps, "fusion.diag", "head", cfg.hidden, 4, rng);
    plus_ = nn::LinearLayer::make(ps, "fusion.plus", "head", cfg.hidden, 1, rng);
  }

  FusionOutput forward(const std::array<double, 8>& v) const {
    Tensor t({8});
    for (int i = 0; i < 8; ++i) t[static_cast<size_t>(i)] = v[static_cast<size_t>(i)];
    return forward_var(nn::constant(t));
  }

  FusionOutput forward_var(const nn::Var& v) const {
    require(v->value.rank() == 1 && v->value.dim(0) == cfg_.in_dim, ErrorKind::ShapeMismatch,
            "fusion input must have dimension " + std::to_string(cfg_.in_dim));
    nn::Var h = nn::relu(l1_(v));
    FusionOutput out;
    out.diag_logits = diag_(h);
    out.diag_probs = nn::softmax_all(out.diag_logits);
    out.plus_logit = plus_(h);
    out.plus_prob = nn::sigmoid(out.plus_logit);
    return out;
  }

  const FusionConfig& config() const { return cfg_; }

 private:
  FusionConfig cfg_;
  nn::LinearLayer l1_, diag_, plus_;
};

}  // namespace ropnet
