#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ropnet/nn/autograd.hpp"

namespace ropnet::nn {

// Registry of trainable parameters and persistent buffers. Registration
// order is the serialization order and the optimizer iteration order, so it
// must be deterministic for a given architecture config.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::string group;  // optimizer parameter group ("backbone", "head", ...)
    bool trainable = true;
    Var var;
  };

  Var create(const std::string& name, const std::string& group, Tensor init,
             bool trainable = true) {
    require(!index_.count(name), ErrorKind::InvalidParameter,
            "duplicate parameter name: " + name);
    auto v = std::make_shared<Node>();
    v->value = std::move(init);
    v->requires_grad = true;
    v->is_param = true;
    v->param_id = static_cast<int>(entries_.size());
    index_[name] = v->param_id;
    entries_.push_back({name, group, trainable, v});
    return v;
  }

  // Buffers live in a deque so references stay valid across registrations.
  Tensor& create_buffer(const std::string& name, Tensor init) {
    require(!buffer_index_.count(name), ErrorKind::InvalidParameter,
            "duplicate buffer name: " + name);
    buffer_index_[name] = buffers_.size();
    buffers_.push_back({name, std::move(init)});
    return buffers_.back().second;
  }

  size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  const std::deque<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }
  std::deque<std::pair<std::string, Tensor>>& buffers() { return buffers_; }

  Var find(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::MissingInput, "no such parameter: " + name);
    return entries_[static_cast<size_t>(it->second)].var;
  }

  void set_group_trainable(const std::string& group, bool trainable) {
    for (auto& e : entries_)
      if (e.group == group) e.trainable = trainable;
  }

  // Total L2 norm of a gradient sink over this store (for clipping).
  double grad_norm(const GradSink& sink) const {
    double acc = 0.0;
    for (const auto& e : entries_) {
      const Tensor* g = sink.get(e.var->param_id);
      if (!g) continue;
      for (double v : g->vec()) acc += v * v;
    }
    return std::sqrt(acc);
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, int> index_;
  std::deque<std::pair<std::string, Tensor>> buffers_;
  std::map<std::string, size_t> buffer_index_;
};

// ----------------------------------------------------------------- layers

inline Tensor kaiming_normal(const std::vector<int>& shape, int fan_in, Rng& rng) {
  Tensor t(shape);
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.vec()) v = rng.normal(0.0, std);
  return t;
}

struct Conv2dLayer {
  Var W, b;
  int stride = 1, pad = 0;

  static Conv2dLayer make(ParamStore& ps, const std::string& name, const std::string& group,
                          int ic, int oc, int k, int stride, int pad, Rng& rng) {
    Conv2dLayer l;
    l.W = ps.create(name + ".weight", group, kaiming_normal({oc, ic, k, k}, ic * k * k, rng));
    l.b = ps.create(name + ".bias", group, Tensor({oc}, 0.0));
    l.stride = stride;
    l.pad = pad;
    return l;
  }

  Var operator()(const Var& x) const { return conv2d(x, W, b, stride, pad); }
};

struct LinearLayer {
  Var W, b;

  static LinearLayer make(ParamStore& ps, const std::string& name, const std::string& group,
                          int in, int out, Rng& rng, bool bias_free = false) {
    LinearLayer l;
    l.W = ps.create(name + ".weight", group, kaiming_normal({out, in}, in, rng));
    l.b = ps.create(name + ".bias", group, Tensor({out}, 0.0), !bias_free);
    if (bias_free) l.b->value.fill(0.0);
    return l;
  }

  Var operator()(const Var& x) const { return linear(x, W, b); }
};

// Batch-statistic layer with running statistics permanently frozen (loaded
// from a checkpoint when transferring, identity-initialized otherwise). The
// affine scale/shift stay trainable by default; freezing them too is a
// config switch applied through set_group_trainable on the "_bn_affine"
// suffix group.
struct FrozenBNLayer {
  Var scale, shift;
  const Tensor* mu = nullptr;
  const Tensor* var = nullptr;

  static FrozenBNLayer make(ParamStore& ps, const std::string& name, const std::string& group,
                            int c) {
    FrozenBNLayer l;
    l.scale = ps.create(name + ".scale", group + "_bn_affine", Tensor({c}, 1.0));
    l.shift = ps.create(name + ".shift", group + "_bn_affine", Tensor({c}, 0.0));
    l.mu = &ps.create_buffer(name + ".running_mean", Tensor({c}, 0.0));
    l.var = &ps.create_buffer(name + ".running_var", Tensor({c}, 1.0));
    return l;
  }

  Var operator()(const Var& x) const { return batchnorm_frozen(x, scale, shift, *mu, *var); }
};

// 1x1 projection used for pyramid standardization and key tensors.
struct Proj1x1 {
  Var W, b;
  bool bias = true;

  static Proj1x1 make(ParamStore& ps, const std::string& name, const std::string& group,
                      int ic, int oc, Rng& rng, bool with_bias = true) {
    Proj1x1 p;
    p.W = ps.create(name + ".weight", group, kaiming_normal({oc, ic, 1, 1}, ic, rng));
    p.b = ps.create(name + ".bias", group, Tensor({oc}, 0.0), with_bias);
    p.bias = with_bias;
    return p;
  }

  Var operator()(const Var& x) const { return conv2d(x, W, b, 1, 0); }
};

}  // namespace ropnet::nn
