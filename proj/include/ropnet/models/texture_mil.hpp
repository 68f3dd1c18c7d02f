#pragma once

#include <vector>

#include "ropnet/nn/backbone.hpp"
#include "ropnet/nn/modules.hpp"

namespace ropnet {

// Texture specialist. A weight-shared encoder embeds each 4-channel patch,
// gated attention (tanh feature branch * sigmoid gate branch) scores the
// instances, and the attention-weighted sum feeds a small MLP that predicts
// the bag-level plus-disease probability.
struct TextureMILConfig {
  nn::BackboneConfig backbone{.arch = "tiny", .in_channels = 4};
  int embed_dim = 256;  // L
  int attn_dim = 128;   // M
  int head_hidden = 64;
  double dropout = 0.2;
  int patch_size = 224;
};

struct MILOutput {
  nn::Var logit;                  // [1] pre-sigmoid
  nn::Var prob;                   // [1]
  std::vector<double> attention;  // a_k snapshot, sums to 1
};

class TextureMIL {
 public:
  TextureMIL(nn::ParamStore& ps, const TextureMILConfig& cfg, Rng& rng)
      : cfg_(cfg), encoder_(ps, cfg.backbone, "backbone", rng) {
    const int enc_ch = encoder_.stage_channels()[2];
    phi_ = nn::LinearLayer::make(ps, "mil.phi", "head", enc_ch, cfg.embed_dim, rng);
    attn_V_ = ps.create("mil.attn.V", "head",
                        nn::kaiming_normal({cfg.attn_dim, cfg.embed_dim}, cfg.embed_dim, rng));
    attn_U_ = ps.create("mil.attn.U", "head",
                        nn::kaiming_normal({cfg.attn_dim, cfg.embed_dim}, cfg.embed_dim, rng));
    attn_w_ = ps.create("mil.attn.w", "head",
                        nn::kaiming_normal({1, cfg.attn_dim}, cfg.attn_dim, rng));
    head1_ = nn::LinearLayer::make(ps, "mil.head1", "head", cfg.embed_dim, cfg.head_hidden, rng);
    head2_ = nn::LinearLayer::make(ps, "mil.head2", "head", cfg.head_hidden, 1, rng);
  }

  // Instance encoder: shared weights, deepest stage pooled and projected to
  // the embedding space.
  nn::Var encode_instance(const Tensor& patch) const {
    require(patch.rank() == 3 && patch.dim(0) == cfg_.backbone.in_channels,
            ErrorKind::ShapeMismatch,
            "instance encoder expects " + std::to_string(cfg_.backbone.in_channels) +
                "-channel patches, got " + std::to_string(patch.dim(0)));
    return encode_instance_var(nn::constant(patch));
  }

  nn::Var encode_instance_var(const nn::Var& patch) const {
    nn::BackboneOutput enc = encoder_.forward(patch);
    return nn::relu(phi_(nn::gap2d(enc.s3)));
  }

  // Gated attention weights over pre-built embeddings H (N x L).
  nn::Var gated_attention(const nn::Var& H) const {
    nn::Var feat = nn::tanh_op(nn::matmul_nt(H, attn_V_));
    nn::Var gate = nn::sigmoid(nn::matmul_nt(H, attn_U_));
    nn::Var scores = nn::matmul_nt(nn::mul(feat, gate), attn_w_);  // (N,1)
    return nn::softmax_all(nn::reshape(scores, {H->value.dim(0)}));
  }

  nn::Var predict_from_context(const nn::Var& z, bool training, Rng& rng) const {
    nn::Var h = nn::relu(head1_(z));
    h = nn::dropout(h, cfg_.dropout, training, rng);
    return head2_(h);
  }

  // Full bag forward. Patch encodings are independent; callers may encode in
  // parallel and pass precomputed embeddings through forward_embedded.
  MILOutput forward(const std::vector<Tensor>& patches, bool training, Rng& rng) const {
    require(!patches.empty(), ErrorKind::InvalidParameter, "bag must be non-empty");
    std::vector<nn::Var> hs;
    hs.reserve(patches.size());
    for (const auto& p : patches) hs.push_back(encode_instance(p));
    return forward_embedded(hs, training, rng);
  }

  MILOutput forward_embedded(const std::vector<nn::Var>& embeddings, bool training,
                             Rng& rng) const {
    nn::Var H = nn::stack_rows(embeddings);
    nn::Var a = gated_attention(H);
    nn::Var z = nn::weighted_rows_sum(H, a);
    MILOutput out;
    out.logit = predict_from_context(z, training, rng);
    out.prob = nn::sigmoid(out.logit);
    out.attention = a->value.vec();
    return out;
  }

  const TextureMILConfig& config() const { return cfg_; }
  const nn::Backbone& encoder() const { return encoder_; }

 private:
  TextureMILConfig cfg_;
  nn::Backbone encoder_;
  nn::LinearLayer phi_;
  nn::Var attn_V_, attn_U_, attn_w_;
  nn::LinearLayer head1_, head2_;
};

}  // namespace ropnet
