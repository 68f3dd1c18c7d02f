#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#define EIGEN_DONT_PARALLELIZE 1
#include <Eigen/Dense>

#include "ropnet/core/error.hpp"
#include "ropnet/core/rng.hpp"
#include "ropnet/core/tensor.hpp"

namespace ropnet::nn {

// Reverse-mode autodiff over Tensor values. Each sample's forward pass
// builds a fresh tape; parameters are shared leaf nodes whose gradients are
// routed into a per-sample GradSink so batches can run on worker threads and
// still reduce in a fixed order.

class GradSink;
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand during backward (non-param nodes)
  bool requires_grad = false;
  bool is_param = false;
  int param_id = -1;
  long order = 0;
  std::vector<Var> parents;
  std::function<void(Node&, GradSink&)> backprop;
};

class GradSink {
 public:
  explicit GradSink(size_t n_params) : grads_(n_params) {}

  void add(int param_id, const Tensor& g) {
    auto& slot = grads_[static_cast<size_t>(param_id)];
    if (!slot.has_value())
      slot = g;
    else
      *slot += g;
  }

  const Tensor* get(int param_id) const {
    const auto& slot = grads_[static_cast<size_t>(param_id)];
    return slot.has_value() ? &*slot : nullptr;
  }

  void merge(const GradSink& other) {
    for (size_t i = 0; i < grads_.size(); ++i)
      if (other.grads_[i].has_value()) {
        if (!grads_[i].has_value())
          grads_[i] = other.grads_[i];
        else
          *grads_[i] += *other.grads_[i];
      }
  }

  void scale(double s) {
    for (auto& g : grads_)
      if (g.has_value()) *g *= s;
  }

  size_t size() const { return grads_.size(); }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

namespace detail {

inline std::atomic<long>& node_counter() {
  static std::atomic<long> c{0};
  return c;
}

inline Var make_node(Tensor value, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->order = node_counter().fetch_add(1, std::memory_order_relaxed);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

// Accumulate into a parent: params route to the sink, tape nodes into grad.
inline void push_grad(const Var& parent, GradSink& sink, const Tensor& g) {
  if (!parent->requires_grad) return;
  if (parent->is_param) {
    sink.add(parent->param_id, g);
    return;
  }
  if (parent->grad.empty())
    parent->grad = g;
  else
    parent->grad += g;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

// Global switch for single-precision GEMM compute with double master values
// (the mixed-precision option). Set once before training; bit-deterministic
// run to run either way.
inline std::atomic<bool>& gemm_f32_flag() {
  static std::atomic<bool> f{false};
  return f;
}

// C(m,n) = A(m,k) * B(k,n) [+ C if accumulate]
inline void gemm(const double* A, const double* B, double* C, int m, int k, int n,
                 bool accumulate = false, bool transA = false, bool transB = false) {
  if (gemm_f32_flag().load(std::memory_order_relaxed)) {
    RowMatF Af = transA
        ? RowMatF(Eigen::Map<const RowMat>(A, k, m).cast<float>().transpose())
        : RowMatF(Eigen::Map<const RowMat>(A, m, k).cast<float>());
    RowMatF Bf = transB
        ? RowMatF(Eigen::Map<const RowMat>(B, n, k).cast<float>().transpose())
        : RowMatF(Eigen::Map<const RowMat>(B, k, n).cast<float>());
    RowMatF Cf = Af * Bf;
    Eigen::Map<RowMat> Cm(C, m, n);
    if (accumulate)
      Cm += Cf.cast<double>();
    else
      Cm = Cf.cast<double>();
    return;
  }
  Eigen::Map<RowMat> Cm(C, m, n);
  auto mult = [&](const auto& Am, const auto& Bm) {
    if (accumulate)
      Cm.noalias() += Am * Bm;
    else
      Cm.noalias() = Am * Bm;
  };
  if (!transA && !transB)
    mult(MapConstMat(A, m, k), MapConstMat(B, k, n));
  else if (transA && !transB)
    mult(MapConstMat(A, k, m).transpose(), MapConstMat(B, k, n));
  else if (!transA && transB)
    mult(MapConstMat(A, m, k), MapConstMat(B, n, k).transpose());
  else
    mult(MapConstMat(A, k, m).transpose(), MapConstMat(B, n, k).transpose());
}

}  // namespace detail

// ------------------------------------------------------------- leaf nodes

inline Var constant(Tensor value) {
  auto n = detail::make_node(std::move(value), {});
  n->requires_grad = false;
  return n;
}

inline Var leaf(Tensor value) {  // differentiable non-parameter leaf
  auto n = detail::make_node(std::move(value), {});
  n->requires_grad = true;
  return n;
}

// --------------------------------------------------------------- backward

inline void backward(const Var& root, GradSink& sink) {
  require(root->value.size() == 1, ErrorKind::InvalidParameter,
          "backward expects a scalar root");
  std::vector<Node*> topo;
  std::vector<Var> stack{root};
  // mark via grad-order trick: collect reachable nodes once
  std::vector<Node*> seen;
  while (!stack.empty()) {
    Var v = stack.back();
    stack.pop_back();
    if (!v->requires_grad || v->is_param) continue;
    if (v->order < 0) continue;  // already visited (order negated)
    topo.push_back(v.get());
    v->order = -v->order - 1;
    for (const auto& p : v->parents) stack.push_back(p);
  }
  for (Node* n : topo) n->order = -(n->order + 1);  // restore
  std::sort(topo.begin(), topo.end(),
            [](const Node* a, const Node* b) { return a->order > b->order; });

  root->grad = Tensor(root->value.shape(), 1.0);
  for (Node* n : topo) {
    if (n->grad.empty() || !n->backprop) continue;
    n->backprop(*n, sink);
  }
}

// ------------------------------------------------------------ element ops

inline Var add(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), ErrorKind::ShapeMismatch, "add shape mismatch");
  Tensor out = a->value;
  out += b->value;
  auto n = detail::make_node(std::move(out), {a, b});
  n->backprop = [](Node& self, GradSink& sink) {
    detail::push_grad(self.parents[0], sink, self.grad);
    detail::push_grad(self.parents[1], sink, self.grad);
  };
  return n;
}

inline Var sub(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), ErrorKind::ShapeMismatch, "sub shape mismatch");
  Tensor out = a->value;
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b->value[i];
  auto n = detail::make_node(std::move(out), {a, b});
  n->backprop = [](Node& self, GradSink& sink) {
    detail::push_grad(self.parents[0], sink, self.grad);
    Tensor neg = self.grad;
    neg *= -1.0;
    detail::push_grad(self.parents[1], sink, neg);
  };
  return n;
}

inline Var mul(const Var& a, const Var& b) {
  require(a->value.same_shape(b->value), ErrorKind::ShapeMismatch, "mul shape mismatch");
  Tensor out = a->value;
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  auto n = detail::make_node(std::move(out), {a, b});
  n->backprop = [](Node& self, GradSink& sink) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    Tensor ga(av.shape());
    Tensor gb(bv.shape());
    for (size_t i = 0; i < av.size(); ++i) {
      ga[i] = self.grad[i] * bv[i];
      gb[i] = self.grad[i] * av[i];
    }
    detail::push_grad(self.parents[0], sink, ga);
    detail::push_grad(self.parents[1], sink, gb);
  };
  return n;
}

inline Var scale(const Var& a, double s) {
  Tensor out = a->value;
  out *= s;
  auto n = detail::make_node(std::move(out), {a});
  n->backprop = [s](Node& self, GradSink& sink) {
    Tensor g = self.grad;
    g *= s;
    detail::push_grad(self.parents[0], sink, g);
  };
  return n;
}

// y = s * x where s is a one-element variable (gate mixing).
inline Var scale_by(const Var& x, const Var& s) {
  require(s->value.size() == 1, ErrorKind::ShapeMismatch, "scale_by expects scalar var");
  Tensor out = x->value;
  out *= s->value[0];
  auto n = detail::make_node(std::move(out), {x, s});
  n->backprop = [](Node& self, GradSink& sink) {
    const double sv = self.parents[1]->value[0];
    Tensor gx = self.grad;
    gx *= sv;
    detail::push_grad(self.parents[0], sink, gx);
    double acc = 0.0;
    const Tensor& xv = self.parents[0]->value;
    for (size_t i = 0; i < xv.size(); ++i) acc += xv[i] * self.grad[i];
    Tensor gs({1});
    gs[0] = acc;
    detail::push_grad(self.parents[1], sink, gs);
  };
  return n;
}

template <typename F, typename DF>
inline Var unary(const Var& a, F f, DF df) {
  Tensor out(a->value.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = f(a->value[i]);
  auto n = detail::make_node(std::move(out), {a});
  n->backprop = [df](Node& self, GradSink& sink) {
    const Tensor& x = self.parents[0]->value;
    const Tensor& y = self.value;
    Tensor g(x.shape());
    for (size_t i = 0; i < x.size(); ++i) g[i] = self.grad[i] * df(x[i], y[i]);
    detail::push_grad(self.parents[0], sink, g);
  };
  return n;
}

inline Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

inline double sigmoid_scalar(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline Var sigmoid(const Var& a) {
  return unary(a, [](double x) { return sigmoid_scalar(x); },
               [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh_op(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

// softplus(x) = log(1 + exp(x)), numerically stable.
inline Var softplus(const Var& a) {
  return unary(a,
               [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
               [](double x, double) { return sigmoid_scalar(x); });
}

// log(max(x, eps)); the clamp floor also zeroes the gradient below eps.
inline Var log_clamped(const Var& a, double eps) {
  return unary(a, [eps](double x) { return std::log(std::max(x, eps)); },
               [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

inline Var pow_const(const Var& a, double p) {
  return unary(a, [p](double x) { return std::pow(x, p); },
               [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

inline Var add_const(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// ---------------------------------------------------------- reductions etc.

inline Var sum_all(const Var& a) {
  Tensor out({1});
  out[0] = a->value.sum();
  auto n = detail::make_node(std::move(out), {a});
  n->backprop = [](Node& self, GradSink& sink) {
    Tensor g(self.parents[0]->value.shape(), self.grad[0]);
    detail::push_grad(self.parents[0], sink, g);
  };
  return n;
}

inline Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size())); }

// Softmax over the whole tensor (spatial maps, instance scores, class
// logits), max-subtracted for stability.
inline Var softmax_all(const Var& a) {
  const Tensor& x = a->value;
  Tensor out(x.shape());
  double mx = x.max();
  double denom = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    denom += out[i];
  }
  for (size_t i = 0; i < x.size(); ++i) out[i] /= denom;
  auto n = detail::make_node(std::move(out), {a});
  n->backprop = [](Node& self, GradSink& sink) {
    const Tensor& y = self.value;
    double dot = 0.0;
    for (size_t i = 0; i < y.size(); ++i) dot += self.grad[i] * y[i];
    Tensor g(y.shape());
    for (size_t i = 0; i < y.size(); ++i) g[i] = y[i] * (self.grad[i] - dot);
    detail::push_grad(self.parents[0], sink, g);
  };
  return n;
}

inline Var gather_scalar(const Var& a, size_t idx) {
  require(idx < a->value.size(), ErrorKind::InvalidParameter, "gather index out of range");
  Tensor out({1});
  out[0] = a->value[idx];
  auto n = detail::make_node(std::move(out), {a});
  n->backprop = [idx](Node& self, GradSink& sink) {
    Tensor g(self.parents[0]->value.shape(), 0.0);
    g[idx] = self.grad[0];
    detail::push_grad(self.parents[0], sink, g);
  };
  return n;
}

inline Var reshape(const Var& a, std::vector<int> shape) {
  require(numel(shape) == a->value.size(), ErrorKind::ShapeMismatch,
          "reshape element count mismatch");
  Tensor out = Tensor::from_data(std::move(shape), a->value.vec());
  auto n = detail::make_node(std::move(out), {a});
  n->backprop = [](Node& self, GradSink& sink) {
    Tensor g = Tensor::from_data(self.parents[0]->value.shape(), self.grad.vec());
    detail::push_grad(self.parents[0], sink, g);
  };
  return n;
}

inline Var slice1d(const Var& a, int start, int len) {
  require(a->value.rank() == 1, ErrorKind::ShapeMismatch, "slice1d expects rank-1");
  require(start >= 0 && start + len <= a->value.dim(0), ErrorKind::InvalidParameter,
          "slice out of range");
  Tensor out({len});
  for (int i = 0; i < len; ++i) out[static_cast<size_t>(i)] = a->value[static_cast<size_t>(start + i)];
  auto n = detail::make_node(std::move(out), {a});
  n->backprop = [start, len](Node& self, GradSink& sink) {
    Tensor g(self.parents[0]->value.shape(), 0.0);
    for (int i = 0; i < len; ++i) g[static_cast<size_t>(start + i)] = self.grad[static_cast<size_t>(i)];
    detail::push_grad(self.parents[0], sink, g);
  };
  return n;
}

inline Var concat1d(const std::vector<Var>& parts) {
  int total = 0;
  for (const auto& p : parts) {
    require(p->value.rank() == 1, ErrorKind::ShapeMismatch, "concat1d expects rank-1 parts");
    total += p->value.dim(0);
  }
  Tensor out({total});
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p->value.dim(0); ++i)
      out[static_cast<size_t>(off + i)] = p->value[static_cast<size_t>(i)];
    off += p->value.dim(0);
  }
  auto n = detail::make_node(std::move(out), parts);
  n->backprop = [](Node& self, GradSink& sink) {
    int off = 0;
    for (auto& p : self.parents) {
      int len = p->value.dim(0);
      Tensor g({len});
      for (int i = 0; i < len; ++i) g[static_cast<size_t>(i)] = self.grad[static_cast<size_t>(off + i)];
      detail::push_grad(p, sink, g);
      off += len;
    }
  };
  return n;
}

// Global average pool (c,h,w) -> (c).
inline Var gap2d(const Var& a) {
  require(a->value.rank() == 3, ErrorKind::ShapeMismatch, "gap2d expects (c,h,w)");
  const int c = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
  Tensor out({c});
  const double inv = 1.0 / (static_cast<double>(h) * w);
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) s += a->value.at(ch, y, x);
    out[static_cast<size_t>(ch)] = s * inv;
  }
  auto n = detail::make_node(std::move(out), {a});
  n->backprop = [c, h, w, inv](Node& self, GradSink& sink) {
    Tensor g({c, h, w});
    for (int ch = 0; ch < c; ++ch) {
      double gv = self.grad[static_cast<size_t>(ch)] * inv;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) g.at(ch, y, x) = gv;
    }
    detail::push_grad(self.parents[0], sink, g);
  };
  return n;
}

// ------------------------------------------------------------ linear algebra

// y = W x + b with W (out,in), x (in), b (out).
inline Var linear(const Var& x, const Var& W, const Var& b) {
  const int out_dim = W->value.dim(0), in_dim = W->value.dim(1);
  require(x->value.rank() == 1 && x->value.dim(0) == in_dim, ErrorKind::ShapeMismatch,
          "linear input dimension mismatch");
  Tensor out({out_dim});
  detail::gemm(W->value.data(), x->value.data(), out.data(), out_dim, in_dim, 1);
  for (int i = 0; i < out_dim; ++i) out[static_cast<size_t>(i)] += b->value[static_cast<size_t>(i)];
  auto n = detail::make_node(std::move(out), {x, W, b});
  n->backprop = [out_dim, in_dim](Node& self, GradSink& sink) {
    const Var& x = self.parents[0];
    const Var& W = self.parents[1];
    const Var& b = self.parents[2];
    if (x->requires_grad) {
      Tensor gx({in_dim});
      detail::gemm(W->value.data(), self.grad.data(), gx.data(), in_dim, out_dim, 1,
                   false, /*transA=*/true);
      detail::push_grad(x, sink, gx);
    }
    if (W->requires_grad) {
      Tensor gW({out_dim, in_dim});
      detail::gemm(self.grad.data(), x->value.data(), gW.data(), out_dim, 1, in_dim);
      detail::push_grad(W, sink, gW);
    }
    detail::push_grad(b, sink, self.grad);
  };
  return n;
}

// Y = H W^T with H (n,k), W (m,k) -> (n,m). Used by the instance-attention
// branches where every row is an instance embedding.
inline Var matmul_nt(const Var& H, const Var& W) {
  const int nrows = H->value.dim(0), k = H->value.dim(1), m = W->value.dim(0);
  require(W->value.dim(1) == k, ErrorKind::ShapeMismatch, "matmul_nt inner dim mismatch");
  Tensor out({nrows, m});
  detail::gemm(H->value.data(), W->value.data(), out.data(), nrows, k, m, false, false, true);
  auto n = detail::make_node(std::move(out), {H, W});
  n->backprop = [nrows, k, m](Node& self, GradSink& sink) {
    const Var& H = self.parents[0];
    const Var& W = self.parents[1];
    if (H->requires_grad) {
      Tensor gH({nrows, k});
      detail::gemm(self.grad.data(), W->value.data(), gH.data(), nrows, m, k);
      detail::push_grad(H, sink, gH);
    }
    if (W->requires_grad) {
      Tensor gW({m, k});
      detail::gemm(self.grad.data(), H->value.data(), gW.data(), m, nrows, k, false, true);
      detail::push_grad(W, sink, gW);
    }
  };
  return n;
}

// z = sum_k a_k H_k with H (n,d), a (n) -> (d). Convex combination when a is
// a softmax output.
inline Var weighted_rows_sum(const Var& H, const Var& a) {
  const int nrows = H->value.dim(0), d = H->value.dim(1);
  require(a->value.rank() == 1 && a->value.dim(0) == nrows, ErrorKind::ShapeMismatch,
          "weights must match row count");
  Tensor out({d});
  detail::gemm(a->value.data(), H->value.data(), out.data(), 1, nrows, d);
  auto n = detail::make_node(std::move(out), {H, a});
  n->backprop = [nrows, d](Node& self, GradSink& sink) {
    const Var& H = self.parents[0];
    const Var& a = self.parents[1];
    if (H->requires_grad) {
      Tensor gH({nrows, d});
      detail::gemm(a->value.data(), self.grad.data(), gH.data(), nrows, 1, d);
      detail::push_grad(H, sink, gH);
    }
    if (a->requires_grad) {
      Tensor ga({nrows});
      detail::gemm(H->value.data(), self.grad.data(), ga.data(), nrows, d, 1);
      detail::push_grad(a, sink, ga);
    }
  };
  return n;
}

inline Var stack_rows(const std::vector<Var>& rows) {
  require(!rows.empty(), ErrorKind::InvalidParameter, "stack_rows needs rows");
  const int d = rows[0]->value.dim(0);
  Tensor out({static_cast<int>(rows.size()), d});
  for (size_t r = 0; r < rows.size(); ++r) {
    require(rows[r]->value.rank() == 1 && rows[r]->value.dim(0) == d,
            ErrorKind::ShapeMismatch, "stack_rows dimension mismatch");
    for (int i = 0; i < d; ++i) out.at(static_cast<int>(r), i) = rows[r]->value[static_cast<size_t>(i)];
  }
  auto n = detail::make_node(std::move(out), rows);
  n->backprop = [d](Node& self, GradSink& sink) {
    for (size_t r = 0; r < self.parents.size(); ++r) {
      Tensor g({d});
      for (int i = 0; i < d; ++i) g[static_cast<size_t>(i)] = self.grad.at(static_cast<int>(r), i);
      detail::push_grad(self.parents[r], sink, g);
    }
  };
  return n;
}

// ------------------------------------------------------------- spatial ops

// S(h,w) = sum_c q_c K(c,h,w): the query/key dot product of the attention
// unit (scaling applied by the caller).
inline Var channel_dot(const Var& K, const Var& q) {
  require(K->value.rank() == 3, ErrorKind::ShapeMismatch, "channel_dot expects (c,h,w)");
  const int c = K->value.dim(0), h = K->value.dim(1), w = K->value.dim(2);
  require(q->value.rank() == 1 && q->value.dim(0) == c, ErrorKind::ShapeMismatch,
          "query dimension mismatch");
  Tensor out({h, w}, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const double qc = q->value[static_cast<size_t>(ch)];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(y, x) += qc * K->value.at(ch, y, x);
  }
  auto n = detail::make_node(std::move(out), {K, q});
  n->backprop = [c, h, w](Node& self, GradSink& sink) {
    const Var& K = self.parents[0];
    const Var& q = self.parents[1];
    if (K->requires_grad) {
      Tensor gK({c, h, w});
      for (int ch = 0; ch < c; ++ch) {
        const double qc = q->value[static_cast<size_t>(ch)];
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) gK.at(ch, y, x) = qc * self.grad.at(y, x);
      }
      detail::push_grad(K, sink, gK);
    }
    if (q->requires_grad) {
      Tensor gq({c});
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) acc += K->value.at(ch, y, x) * self.grad.at(y, x);
        gq[static_cast<size_t>(ch)] = acc;
      }
      detail::push_grad(q, sink, gq);
    }
  };
  return n;
}

// Y(c,h,w) = A(h,w) * V(c,h,w), attention broadcast over channels.
inline Var spatial_scale(const Var& V, const Var& A) {
  require(V->value.rank() == 3 && A->value.rank() == 2, ErrorKind::ShapeMismatch,
          "spatial_scale expects (c,h,w) and (h,w)");
  const int c = V->value.dim(0), h = V->value.dim(1), w = V->value.dim(2);
  require(A->value.dim(0) == h && A->value.dim(1) == w, ErrorKind::ShapeMismatch,
          "attention map shape mismatch");
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(ch, y, x) = V->value.at(ch, y, x) * A->value.at(y, x);
  auto n = detail::make_node(std::move(out), {V, A});
  n->backprop = [c, h, w](Node& self, GradSink& sink) {
    const Var& V = self.parents[0];
    const Var& A = self.parents[1];
    if (V->requires_grad) {
      Tensor gV({c, h, w});
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) gV.at(ch, y, x) = self.grad.at(ch, y, x) * A->value.at(y, x);
      detail::push_grad(V, sink, gV);
    }
    if (A->requires_grad) {
      Tensor gA({h, w}, 0.0);
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) gA.at(y, x) += self.grad.at(ch, y, x) * V->value.at(ch, y, x);
      detail::push_grad(A, sink, gA);
    }
  };
  return n;
}

// ------------------------------------------------------------------ conv2d

namespace detail {

inline void im2col(const Tensor& x, int kh, int kw, int stride, int pad,
                   int oh, int ow, Tensor& col) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  // col: (c*kh*kw, oh*ow)
  double* cp = col.data();
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < ow; ++ox, ++cp) {
            const int ix = ox * stride + kx - pad;
            *cp = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x.at(ch, iy, ix) : 0.0;
          }
        }
      }
}

inline void col2im(const Tensor& col, int c, int h, int w, int kh, int kw,
                   int stride, int pad, int oh, int ow, Tensor& x) {
  x.fill(0.0);
  const double* cp = col.data();
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx)
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < ow; ++ox, ++cp) {
            const int ix = ox * stride + kx - pad;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) x.at(ch, iy, ix) += *cp;
          }
        }
}

}  // namespace detail

// 2D convolution, single sample, im2col + GEMM. W is (oc, ic, kh, kw),
// b (oc). The im2col buffer is kept alive on the tape for the backward pass.
inline Var conv2d(const Var& x, const Var& W, const Var& b, int stride, int pad) {
  require(x->value.rank() == 3 && W->value.rank() == 4, ErrorKind::ShapeMismatch,
          "conv2d expects (c,h,w) input and (oc,ic,kh,kw) weights");
  const int ic = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  const int oc = W->value.dim(0), kh = W->value.dim(2), kw = W->value.dim(3);
  require(W->value.dim(1) == ic, ErrorKind::ShapeMismatch,
          "conv2d channel mismatch: input has " + std::to_string(ic) + ", stem expects " +
              std::to_string(W->value.dim(1)));
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (w + 2 * pad - kw) / stride + 1;
  require(oh > 0 && ow > 0, ErrorKind::ShapeMismatch, "conv2d output would be empty");

  auto col = std::make_shared<Tensor>(Tensor({ic * kh * kw, oh * ow}));
  detail::im2col(x->value, kh, kw, stride, pad, oh, ow, *col);

  Tensor out({oc, oh, ow});
  detail::gemm(W->value.data(), col->data(), out.data(), oc, ic * kh * kw, oh * ow);
  for (int ch = 0; ch < oc; ++ch) {
    const double bv = b->value[static_cast<size_t>(ch)];
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) out.at(ch, y, xx) += bv;
  }

  auto n = detail::make_node(std::move(out), {x, W, b});
  n->backprop = [col, ic, h, w, oc, kh, kw, stride, pad, oh, ow](Node& self, GradSink& sink) {
    const Var& x = self.parents[0];
    const Var& W = self.parents[1];
    const Var& b = self.parents[2];
    const int k = ic * kh * kw, o = oh * ow;
    if (W->requires_grad) {
      Tensor gW({oc, ic, kh, kw});
      detail::gemm(self.grad.data(), col->data(), gW.data(), oc, o, k, false, false, true);
      detail::push_grad(W, sink, gW);
    }
    if (b->requires_grad) {
      Tensor gb({oc});
      for (int ch = 0; ch < oc; ++ch) {
        double acc = 0.0;
        for (int i = 0; i < o; ++i) acc += self.grad[static_cast<size_t>(ch) * o + static_cast<size_t>(i)];
        gb[static_cast<size_t>(ch)] = acc;
      }
      detail::push_grad(b, sink, gb);
    }
    if (x->requires_grad) {
      Tensor gcol({k, o});
      detail::gemm(W->value.data(), self.grad.data(), gcol.data(), k, oc, o, false, true);
      Tensor gx({ic, h, w});
      detail::col2im(gcol, ic, h, w, kh, kw, stride, pad, oh, ow, gx);
      detail::push_grad(x, sink, gx);
    }
  };
  return n;
}

// Per-channel affine with frozen running statistics. y = (x - mu)/sqrt(v+eps)
// * scale + shift; mu and v never update, so train and eval modes match.
inline Var batchnorm_frozen(const Var& x, const Var& scale_p, const Var& shift_p,
                            const Tensor& mu, const Tensor& var, double eps = 1e-5) {
  require(x->value.rank() == 3, ErrorKind::ShapeMismatch, "batchnorm expects (c,h,w)");
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  std::vector<double> k(static_cast<size_t>(c)), d(static_cast<size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    size_t i = static_cast<size_t>(ch);
    k[i] = scale_p->value[i] / std::sqrt(var[i] + eps);
    d[i] = shift_p->value[i] - mu[i] * k[i];
  }
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx)
        out.at(ch, y, xx) = x->value.at(ch, y, xx) * k[static_cast<size_t>(ch)] + d[static_cast<size_t>(ch)];
  auto n = detail::make_node(std::move(out), {x, scale_p, shift_p});
  Tensor mu_c = mu, var_c = var;
  n->backprop = [c, h, w, mu_c, var_c, eps](Node& self, GradSink& sink) {
    const Var& x = self.parents[0];
    const Var& scale_p = self.parents[1];
    const Var& shift_p = self.parents[2];
    if (x->requires_grad) {
      Tensor gx({c, h, w});
      for (int ch = 0; ch < c; ++ch) {
        size_t i = static_cast<size_t>(ch);
        double kk = scale_p->value[i] / std::sqrt(var_c[i] + eps);
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) gx.at(ch, y, xx) = self.grad.at(ch, y, xx) * kk;
      }
      detail::push_grad(x, sink, gx);
    }
    if (scale_p->requires_grad || shift_p->requires_grad) {
      Tensor gs({c}), gb({c});
      for (int ch = 0; ch < c; ++ch) {
        size_t i = static_cast<size_t>(ch);
        double inv = 1.0 / std::sqrt(var_c[i] + eps);
        double acc_s = 0.0, acc_b = 0.0;
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx) {
            double xhat = (x->value.at(ch, y, xx) - mu_c[i]) * inv;
            acc_s += self.grad.at(ch, y, xx) * xhat;
            acc_b += self.grad.at(ch, y, xx);
          }
        gs[i] = acc_s;
        gb[i] = acc_b;
      }
      detail::push_grad(scale_p, sink, gs);
      detail::push_grad(shift_p, sink, gb);
    }
  };
  return n;
}

// Group normalization over a rank-1 feature vector (per-sample statistics).
inline Var groupnorm_vec(const Var& x, int groups, const Var& gamma, const Var& beta,
                         double eps = 1e-5) {
  require(x->value.rank() == 1, ErrorKind::ShapeMismatch, "groupnorm_vec expects rank-1");
  const int c = x->value.dim(0);
  require(c % groups == 0, ErrorKind::InvalidParameter,
          "channels must divide evenly into groups");
  const int m = c / groups;
  Tensor xhat({c});
  std::vector<double> inv_std(static_cast<size_t>(groups));
  for (int g = 0; g < groups; ++g) {
    double mean = 0.0;
    for (int i = 0; i < m; ++i) mean += x->value[static_cast<size_t>(g * m + i)];
    mean /= m;
    double var = 0.0;
    for (int i = 0; i < m; ++i) {
      double dv = x->value[static_cast<size_t>(g * m + i)] - mean;
      var += dv * dv;
    }
    var /= m;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(g)] = inv;
    for (int i = 0; i < m; ++i)
      xhat[static_cast<size_t>(g * m + i)] = (x->value[static_cast<size_t>(g * m + i)] - mean) * inv;
  }
  Tensor out({c});
  for (int i = 0; i < c; ++i)
    out[static_cast<size_t>(i)] = xhat[static_cast<size_t>(i)] * gamma->value[static_cast<size_t>(i)] +
                                  beta->value[static_cast<size_t>(i)];
  auto n = detail::make_node(std::move(out), {x, gamma, beta});
  n->backprop = [c, m, groups, xhat, inv_std](Node& self, GradSink& sink) {
    const Var& x = self.parents[0];
    const Var& gamma = self.parents[1];
    const Var& beta = self.parents[2];
    if (gamma->requires_grad || beta->requires_grad) {
      Tensor gg({c}), gb({c});
      for (int i = 0; i < c; ++i) {
        gg[static_cast<size_t>(i)] = self.grad[static_cast<size_t>(i)] * xhat[static_cast<size_t>(i)];
        gb[static_cast<size_t>(i)] = self.grad[static_cast<size_t>(i)];
      }
      detail::push_grad(gamma, sink, gg);
      detail::push_grad(beta, sink, gb);
    }
    if (x->requires_grad) {
      Tensor gx({c});
      for (int g = 0; g < groups; ++g) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        std::vector<double> dxhat(static_cast<size_t>(m));
        for (int i = 0; i < m; ++i) {
          size_t idx = static_cast<size_t>(g * m + i);
          dxhat[static_cast<size_t>(i)] = self.grad[idx] * gamma->value[idx];
          mean_dxhat += dxhat[static_cast<size_t>(i)];
          mean_dxhat_xhat += dxhat[static_cast<size_t>(i)] * xhat[idx];
        }
        mean_dxhat /= m;
        mean_dxhat_xhat /= m;
        for (int i = 0; i < m; ++i) {
          size_t idx = static_cast<size_t>(g * m + i);
          gx[idx] = inv_std[static_cast<size_t>(g)] *
                    (dxhat[static_cast<size_t>(i)] - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
        }
      }
      detail::push_grad(x, sink, gx);
    }
  };
  return n;
}

// Inverted dropout; identity in eval mode.
inline Var dropout(const Var& x, double p, bool training, Rng& rng) {
  if (!training || p <= 0.0) return x;
  require(p < 1.0, ErrorKind::InvalidParameter, "dropout rate must be < 1");
  auto mask = std::make_shared<Tensor>(x->value.shape());
  const double keep = 1.0 - p;
  for (size_t i = 0; i < mask->size(); ++i)
    (*mask)[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  Tensor out(x->value.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x->value[i] * (*mask)[i];
  auto n = detail::make_node(std::move(out), {x});
  n->backprop = [mask](Node& self, GradSink& sink) {
    Tensor g(self.grad.shape());
    for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * (*mask)[i];
    detail::push_grad(self.parents[0], sink, g);
  };
  return n;
}

}  // namespace ropnet::nn
