#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "ropnet/core/error.hpp"

namespace ropnet {

// Dense row-major tensor of doubles. Rank is dynamic; images use (c, h, w),
// matrices (rows, cols). All numeric state in the library flows through this
// type so that serialization and gradient checking stay uniform.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}
  Tensor(std::initializer_list<int> shape, double fill = 0.0)
      : Tensor(std::vector<int>(shape), fill) {}

  static Tensor from_data(std::vector<int> shape, std::vector<double> data) {
    Tensor t;
    require(checked_size(shape) == data.size(), ErrorKind::ShapeMismatch,
            "tensor data length does not match shape");
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  // (c,h,w) accessor for rank-3 tensors.
  double& at(int c, int y, int x) {
    return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  // (r,c) accessor for rank-2 tensors.
  double& at(int r, int c) {
    return data_[static_cast<size_t>(r) * shape_[1] + c];
  }
  double at(int r, int c) const {
    return data_[static_cast<size_t>(r) * shape_[1] + c];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor& operator+=(const Tensor& o) {
    require(same_shape(o), ErrorKind::ShapeMismatch, "tensor += shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
  double min() const { return data_.empty() ? 0.0 : *std::min_element(data_.begin(), data_.end()); }
  double max() const { return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end()); }

  double norm2() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static size_t checked_size(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
      require(d >= 0, ErrorKind::InvalidParameter, "negative tensor dimension");
      n *= static_cast<size_t>(d);
    }
    return shape.empty() ? 0 : n;
  }

 private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

inline size_t numel(const std::vector<int>& shape) {
  return Tensor::checked_size(shape);
}

}  // namespace ropnet
