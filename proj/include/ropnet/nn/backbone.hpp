#pragma once

#include <array>
#include <string>
#include <vector>

#include "ropnet/nn/modules.hpp"

namespace ropnet::nn {

// Pluggable convolutional encoder producing three stage outputs at strides
// {8, 16, 32}. Two reference configurations are registered:
//   tiny  - ~84k parameters, the desk-scale default for tests and the
//           synthetic pipeline
//   small - a wider, deeper variant for larger runs
// All batch-statistic layers run with frozen running statistics, so the
// encoder is deterministic and mode-independent.
struct BackboneConfig {
  std::string arch = "tiny";
  int in_channels = 3;
};

struct BackboneOutput {
  Var s1, s2, s3;  // strides 8, 16, 32
};

class Backbone {
 public:
  Backbone(ParamStore& ps, const BackboneConfig& cfg, const std::string& group, Rng& rng)
      : cfg_(cfg) {
    struct Block {
      int oc, k, stride;
      int tap;  // stage index emitted after this block, or -1
    };
    std::vector<Block> plan;
    if (cfg.arch == "tiny") {
      plan = {{16, 4, 4, -1}, {32, 3, 2, 0}, {48, 3, 2, 1}, {64, 3, 2, -1}, {64, 3, 1, 2}};
      stage_channels_ = {32, 48, 64};
    } else if (cfg.arch == "small") {
      plan = {{24, 4, 4, -1}, {48, 3, 2, -1}, {48, 3, 1, 0},
              {80, 3, 2, -1}, {80, 3, 1, 1},  {128, 3, 2, -1}, {128, 3, 1, 2}};
      stage_channels_ = {48, 80, 128};
    } else {
      raise(ErrorKind::InvalidConfig, "unknown backbone arch: " + cfg.arch);
    }
    int ic = cfg.in_channels;
    int idx = 0;
    for (const auto& b : plan) {
      std::string name = group + ".enc" + std::to_string(idx++);
      int pad = b.k == 4 ? 0 : (b.k - 1) / 2;
      convs_.push_back(Conv2dLayer::make(ps, name + ".conv", group, ic, b.oc, b.k, b.stride, pad));
      bns_.push_back(FrozenBNLayer::make(ps, name + ".bn", group, b.oc));
      taps_.push_back(b.tap);
      ic = b.oc;
    }
  }

  BackboneOutput forward(const Var& x) const {
    require(x->value.dim(0) == cfg_.in_channels, ErrorKind::ShapeMismatch,
            "backbone expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                std::to_string(x->value.dim(0)));
    BackboneOutput out;
    Var h = x;
    for (size_t i = 0; i < convs_.size(); ++i) {
      h = relu(bns_[i](convs_[i](h)));
      switch (taps_[i]) {
        case 0: out.s1 = h; break;
        case 1: out.s2 = h; break;
        case 2: out.s3 = h; break;
        default: break;
      }
    }
    return out;
  }

  const std::array<int, 3>& stage_channels() const { return stage_channels_; }
  static constexpr std::array<int, 3> stage_strides() { return {8, 16, 32}; }
  const BackboneConfig& config() const { return cfg_; }

  // First conv weight, exposed so a 4-channel stem can be seeded from a
  // 3-channel checkpoint: RGB filter planes are copied, the extra channel is
  // freshly initialized with the same variance-scaling scheme.
  Var stem_weight() const { return convs_.front().W; }

 private:
  BackboneConfig cfg_;
  std::vector<Conv2dLayer> convs_;
  std::vector<FrozenBNLayer> bns_;
  std::vector<int> taps_;
  std::array<int, 3> stage_channels_{};
};

// Copy pretrained 3-channel stem filters into the RGB planes of a 4-channel
// stem, leaving the fourth (vesselness) plane on its fresh initialization.
inline void seed_stem_from_3ch(const Var& stem4, const Tensor& stem3) {
  require(stem4->value.rank() == 4 && stem3.rank() == 4, ErrorKind::ShapeMismatch,
          "stem weights must be rank-4");
  require(stem4->value.dim(1) == 4 && stem3.dim(1) == 3, ErrorKind::ShapeMismatch,
          "expected 4-channel destination and 3-channel source");
  require(stem4->value.dim(0) == stem3.dim(0) && stem4->value.dim(2) == stem3.dim(2) &&
              stem4->value.dim(3) == stem3.dim(3),
          ErrorKind::ShapeMismatch, "stem filter geometry mismatch");
  const int oc = stem3.dim(0), k = stem3.dim(2);
  for (int o = 0; o < oc; ++o)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < k; ++y)
        for (int x = 0; x < k; ++x) {
          size_t dst = ((static_cast<size_t>(o) * 4 + c) * k + y) * k + x;
          size_t src = ((static_cast<size_t>(o) * 3 + c) * k + y) * k + x;
          stem4->value[dst] = stem3[src];
        }
}

}  // namespace ropnet::nn
