#pragma once

#include <array>
#include <vector>

#include "ropnet/nn/backbone.hpp"
#include "ropnet/nn/modules.hpp"

namespace ropnet {

// Structure specialist. Clinical metadata is projected into per-scale query
// vectors that drive spatial dot-product attention over a three-scale
// feature pyramid; a learnable gate mixes attended and raw features, pooled
// features are FiLM-modulated by the same metadata, and a group-normalized
// head emits 4 class logits. Auxiliary heads hang off the first two
// attention units during training.
struct StructureNetConfig {
  nn::BackboneConfig backbone{};  // 3-channel input
  int d_vis = 64;
  int query_hidden = 32;   // metadata projector: 3 -> 32 -> d_vis
  int film_hidden = 64;    // FiLM generator: 3 -> 64 -> 2*fused_dim
  int head_hidden = 64;
  int gn_groups = 8;
  int input_resolution = 384;
  bool use_metadata = true;  // false: metadata zeroed (ablation switch)
  double gate_init = -2.0;
  int fused_dim() const { return 3 * d_vis; }  // concatenated per-scale GAP
};

struct StructureOutput {
  nn::Var main_logits;               // [4]
  std::vector<nn::Var> aux_logits;   // 2 x [4], training mode only
  std::vector<Tensor> attention_maps;  // per scale (H_s, W_s), sums to 1
  std::array<double, 3> gate_values{};
};

class StructureNet {
 public:
  StructureNet(nn::ParamStore& ps, const StructureNetConfig& cfg, Rng& rng)
      : cfg_(cfg), backbone_(ps, cfg.backbone, "backbone", rng) {
    const auto& sc = backbone_.stage_channels();
    for (int s = 0; s < 3; ++s) {
      std::string tag = "aq" + std::to_string(s);
      proj_[static_cast<size_t>(s)] = nn::Proj1x1::make(
          ps, tag + ".proj", "head", sc[static_cast<size_t>(s)], cfg.d_vis, rng);
      key_[static_cast<size_t>(s)] = nn::Proj1x1::make(
          ps, tag + ".key", "head", cfg.d_vis, cfg.d_vis, rng, /*with_bias=*/false);
      phi1_[static_cast<size_t>(s)] =
          nn::LinearLayer::make(ps, tag + ".phi1", "head", 3, cfg.query_hidden, rng);
      phi2_[static_cast<size_t>(s)] =
          nn::LinearLayer::make(ps, tag + ".phi2", "head", cfg.query_hidden, cfg.d_vis, rng);
      alpha_[static_cast<size_t>(s)] =
          ps.create(tag + ".gate_alpha", "head", Tensor({1}, cfg.gate_init));
    }
    psi1_ = nn::LinearLayer::make(ps, "film.psi1", "head", 3, cfg.film_hidden, rng);
    psi2_ = nn::LinearLayer::make(ps, "film.psi2", "head", cfg.film_hidden,
                                  2 * cfg.fused_dim(), rng);
    // Near-identity FiLM at initialization: small weights, gamma bias 1.
    for (auto& v : psi2_.W->value.vec()) v *= 0.02;
    for (int i = 0; i < cfg.fused_dim(); ++i) psi2_.b->value[static_cast<size_t>(i)] = 1.0;

    gn_gamma_ = ps.create("head.gn.gamma", "head", Tensor({cfg.fused_dim()}, 1.0));
    gn_beta_ = ps.create("head.gn.beta", "head", Tensor({cfg.fused_dim()}, 0.0));
    head1_ = nn::LinearLayer::make(ps, "head.fc1", "head", cfg.fused_dim(), cfg.head_hidden, rng);
    head2_ = nn::LinearLayer::make(ps, "head.fc2", "head", cfg.head_hidden, 4, rng);
    for (int s = 0; s < 2; ++s)
      aux_[static_cast<size_t>(s)] = nn::LinearLayer::make(
          ps, "aux" + std::to_string(s + 1) + ".fc", "head", cfg.d_vis, 4, rng);
  }

  // Full forward pass on one sample. The image tensor is (3, R, R) at the
  // configured resolution; x_tab is the normalized clinical vector.
  StructureOutput forward(const Tensor& image, const std::array<double, 3>& x_tab,
                          bool training) const {
    require(image.rank() == 3 && image.dim(0) == 3 &&
                image.dim(1) == cfg_.input_resolution && image.dim(2) == cfg_.input_resolution,
            ErrorKind::ShapeMismatch,
            "structure stream expects (3," + std::to_string(cfg_.input_resolution) + "," +
                std::to_string(cfg_.input_resolution) + ") input");
    nn::Var x = nn::constant(image);
    Tensor xt({3});
    if (cfg_.use_metadata)
      for (int i = 0; i < 3; ++i) xt[static_cast<size_t>(i)] = x_tab[static_cast<size_t>(i)];
    nn::Var xt_var = nn::constant(xt);
    return forward_vars(x, xt_var, training);
  }

  // Variant taking pre-built variables (used by gradient checks, which
  // differentiate with respect to the metadata input as well).
  StructureOutput forward_vars(const nn::Var& image, const nn::Var& x_tab,
                               bool training) const {
    nn::BackboneOutput pyr = backbone_.forward(image);
    std::array<nn::Var, 3> stages{pyr.s1, pyr.s2, pyr.s3};

    StructureOutput out;
    std::vector<nn::Var> pooled;
    for (int s = 0; s < 3; ++s) {
      size_t si = static_cast<size_t>(s);
      nn::Var V = proj_[si](stages[si]);
      nn::Var q = nn::relu(phi2_[si](nn::relu(phi1_[si](x_tab))));
      nn::Var K = key_[si](V);
      nn::Var scores = nn::scale(nn::channel_dot(K, q), 1.0 / std::sqrt(cfg_.d_vis));
      nn::Var A = nn::softmax_all(scores);
      nn::Var AV = nn::spatial_scale(V, A);
      nn::Var g = nn::sigmoid(alpha_[si]);
      nn::Var refined = nn::add(V, nn::scale_by(nn::sub(AV, V), g));
      pooled.push_back(nn::gap2d(refined));
      out.attention_maps.push_back(A->value);
      out.gate_values[si] = g->value[0];
      if (training && s < 2) out.aux_logits.push_back(aux_[si](pooled.back()));
    }

    nn::Var z = nn::concat1d(pooled);
    nn::Var film = psi2_(nn::relu(psi1_(x_tab)));
    nn::Var gamma = nn::slice1d(film, 0, cfg_.fused_dim());
    nn::Var beta = nn::slice1d(film, cfg_.fused_dim(), cfg_.fused_dim());
    nn::Var z_final = nn::add(nn::mul(gamma, z), beta);

    nn::Var gn = nn::groupnorm_vec(z_final, cfg_.gn_groups, gn_gamma_, gn_beta_);
    out.main_logits = head2_(nn::relu(head1_(gn)));
    return out;
  }

  const StructureNetConfig& config() const { return cfg_; }
  const nn::Backbone& backbone() const { return backbone_; }

 private:
  StructureNetConfig cfg_;
  nn::Backbone backbone_;
  std::array<nn::Proj1x1, 3> proj_;
  std::array<nn::Proj1x1, 3> key_;
  std::array<nn::LinearLayer, 3> phi1_, phi2_;
  std::array<nn::Var, 3> alpha_;
  nn::LinearLayer psi1_, psi2_;
  nn::Var gn_gamma_, gn_beta_;
  nn::LinearLayer head1_, head2_;
  std::array<nn::LinearLayer, 2> aux_;
};

}  // namespace ropnet
