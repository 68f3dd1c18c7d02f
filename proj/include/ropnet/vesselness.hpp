#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "ropnet/core/error.hpp"
#include "ropnet/core/tensor.hpp"
#include "ropnet/io/image_io.hpp"

namespace ropnet {

// Multiscale Hessian vesselness. The tubularity measure rejects pixels whose
// larger-magnitude eigenvalue is positive (bright ridges on dark background
// after polarity inversion), otherwise scores
//   exp(-R_B^2 / 2 beta^2) * (1 - exp(-S^2 / 2 c^2))
// with blobness R_B = |l1|/|l2| and structureness S = sqrt(l1^2 + l2^2),
// maximized over scales.
struct VesselnessConfig {
  std::vector<double> scales{1.0, 2.0, 3.0, 4.0};
  double beta = 0.5;
  // c <= 0 selects the adaptive rule: half the maximum Frobenius norm of the
  // scale-normalized Hessian over the image, per scale. The values actually
  // used are reported back for the sidecar.
  double c = 0.0;
  bool invert_input = true;  // retinal vessels are dark on bright background

  void validate() const {
    require(!scales.empty(), ErrorKind::InvalidParameter, "scales must be non-empty");
    for (double s : scales)
      require(s > 0.0, ErrorKind::InvalidParameter, "scales must be positive");
    require(beta > 0.0, ErrorKind::InvalidParameter, "beta must be positive");
  }
};

namespace detail {

// Mirror boundary (no edge duplication): -1 -> 1, n -> n-2.
inline int mirror_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

struct GaussianKernels {
  int radius = 0;
  std::vector<double> g0;  // smoothing, sum 1
  std::vector<double> g2;  // second derivative; sum 0, quadratic moment 2
  std::vector<double> g1;  // first derivative; odd, first moment -1 (conv)
};

// Sampled Gaussian derivative kernels with discrete moment corrections so a
// constant image yields exactly zero and z = x^2 reproduces d2z/dx2 = 2.
inline GaussianKernels gaussian_kernels(double sigma) {
  GaussianKernels k;
  k.radius = std::max(1, static_cast<int>(std::ceil(3.5 * sigma)));
  const int r = k.radius;
  k.g0.resize(static_cast<size_t>(2 * r + 1));
  k.g1.resize(k.g0.size());
  k.g2.resize(k.g0.size());
  const double s2 = sigma * sigma;
  for (int j = -r; j <= r; ++j) {
    double g = std::exp(-0.5 * j * j / s2);
    k.g0[static_cast<size_t>(j + r)] = g;
    k.g1[static_cast<size_t>(j + r)] = -j / s2 * g;
    k.g2[static_cast<size_t>(j + r)] = (j * j / (s2 * s2) - 1.0 / s2) * g;
  }
  double sum0 = 0.0;
  for (double v : k.g0) sum0 += v;
  for (auto& v : k.g0) v /= sum0;

  // g2: remove the DC response, then scale the quadratic moment to 2.
  double mean2 = 0.0;
  for (double v : k.g2) mean2 += v;
  mean2 /= static_cast<double>(k.g2.size());
  for (auto& v : k.g2) v -= mean2;
  double m2 = 0.0;
  for (int j = -r; j <= r; ++j) m2 += j * j * k.g2[static_cast<size_t>(j + r)];
  for (auto& v : k.g2) v *= 2.0 / m2;

  // g1: convolution with x must give 1, i.e. sum(j * g1[j]) = -1.
  double m1 = 0.0;
  for (int j = -r; j <= r; ++j) m1 += j * k.g1[static_cast<size_t>(j + r)];
  for (auto& v : k.g1) v *= -1.0 / m1;
  return k;
}

// 1D convolution along rows with an even-symmetric kernel. Accumulation is
// center-outward over symmetric pairs, which makes the result invariant
// under horizontal flips bit-for-bit (the property the 90-degree rotation
// equivariance of the vesselness map rests on).
inline Tensor conv_rows_even(const Tensor& in, const std::vector<double>& k, int r) {
  const int h = in.dim(0), w = in.dim(1);
  Tensor out({h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = k[static_cast<size_t>(r)] * in.at(y, x);
      for (int j = 1; j <= r; ++j) {
        double pair = in.at(y, mirror_index(x - j, w)) + in.at(y, mirror_index(x + j, w));
        acc += k[static_cast<size_t>(r + j)] * pair;
      }
      out.at(y, x) = acc;
    }
  }
  return out;
}

inline Tensor conv_cols_even(const Tensor& in, const std::vector<double>& k, int r) {
  const int h = in.dim(0), w = in.dim(1);
  Tensor out({h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = k[static_cast<size_t>(r)] * in.at(y, x);
      for (int j = 1; j <= r; ++j) {
        double pair = in.at(mirror_index(y - j, h), x) + in.at(mirror_index(y + j, h), x);
        acc += k[static_cast<size_t>(r + j)] * pair;
      }
      out.at(y, x) = acc;
    }
  }
  return out;
}

inline Tensor transpose2d(const Tensor& in) {
  Tensor out({in.dim(1), in.dim(0)});
  for (int y = 0; y < in.dim(0); ++y)
    for (int x = 0; x < in.dim(1); ++x) out.at(x, y) = in.at(y, x);
  return out;
}

}  // namespace detail

// Scale-normalized Hessian components (multiplied by sigma^2 so responses
// are comparable across scales before the max).
struct HessianField {
  Tensor lxx, lyy, lxy;  // each (h,w)
};

inline HessianField hessian_field(const Tensor& gray, double sigma) {
  require(gray.rank() == 2, ErrorKind::ShapeMismatch, "expected (h,w) input");
  require(sigma > 0.0, ErrorKind::InvalidParameter, "sigma must be positive");
  auto k = detail::gaussian_kernels(sigma);
  const int r = k.radius;
  const double s2 = sigma * sigma;

  HessianField f;
  f.lxx = detail::conv_cols_even(detail::conv_rows_even(gray, k.g2, r), k.g0, r);
  {
    Tensor t = detail::transpose2d(gray);
    Tensor lyy_t = detail::conv_cols_even(detail::conv_rows_even(t, k.g2, r), k.g0, r);
    f.lyy = detail::transpose2d(lyy_t);
  }

  // Mixed derivative evaluated directly over kernel quadrants; the kernel is
  // odd in both axes so center row/column terms vanish. Pairing (i,j) with
  // (j,i) keeps the evaluation exactly symmetric under transposition.
  const int h = gray.dim(0), w = gray.dim(1);
  f.lxy = Tensor({h, w});
  const auto& g1 = k.g1;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto quad = [&](int i, int j) {
        int ym = detail::mirror_index(y - i, h), yp = detail::mirror_index(y + i, h);
        int xm = detail::mirror_index(x - j, w), xp = detail::mirror_index(x + j, w);
        return (gray.at(ym, xm) + gray.at(yp, xp)) - (gray.at(ym, xp) + gray.at(yp, xm));
      };
      double acc = 0.0;
      for (int i = 1; i <= r; ++i) {
        acc += g1[static_cast<size_t>(r + i)] * g1[static_cast<size_t>(r + i)] * quad(i, i);
        for (int j = i + 1; j <= r; ++j)
          acc += g1[static_cast<size_t>(r + i)] * g1[static_cast<size_t>(r + j)] *
                 (quad(i, j) + quad(j, i));
      }
      f.lxy.at(y, x) = acc;
    }
  }

  f.lxx *= s2;
  f.lyy *= s2;
  f.lxy *= s2;
  return f;
}

// Eigenvalues of the 2x2 symmetric Hessian, sorted by |l1| <= |l2|.
struct HessianEigen {
  Tensor lambda1, lambda2;
};

inline HessianEigen hessian_eigen_of(const HessianField& f) {
  const int h = f.lxx.dim(0), w = f.lxx.dim(1);
  HessianEigen e{Tensor({h, w}), Tensor({h, w})};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double a = f.lxx.at(y, x), c = f.lyy.at(y, x), b = f.lxy.at(y, x);
      double mean = 0.5 * (a + c);
      double q = 0.5 * (a - c);
      double root = std::sqrt(q * q + b * b);
      double la = mean + root, lb = mean - root;
      if (std::abs(la) <= std::abs(lb)) {
        e.lambda1.at(y, x) = la;
        e.lambda2.at(y, x) = lb;
      } else {
        e.lambda1.at(y, x) = lb;
        e.lambda2.at(y, x) = la;
      }
    }
  return e;
}

inline HessianEigen hessian_eigen(const Tensor& gray, double sigma) {
  return hessian_eigen_of(hessian_field(gray, sigma));
}

struct VesselnessResult {
  Tensor vmap;                 // (h,w) in [0,1]
  std::vector<double> c_used;  // per scale, for the sidecar
};

inline VesselnessResult frangi_vesselness(const Tensor& green, const VesselnessConfig& cfg) {
  cfg.validate();
  require(green.rank() == 2, ErrorKind::ShapeMismatch, "expected (h,w) green channel");
  const int h = green.dim(0), w = green.dim(1);

  Tensor input = green;
  if (cfg.invert_input)
    for (auto& v : input.vec()) v = 1.0 - v;

  VesselnessResult res;
  res.vmap = Tensor({h, w}, 0.0);
  res.c_used.reserve(cfg.scales.size());

  for (double sigma : cfg.scales) {
    HessianEigen e = hessian_eigen(input, sigma);
    double c_scale = cfg.c;
    if (c_scale <= 0.0) {
      double max_s = 0.0;
      for (size_t i = 0; i < e.lambda1.size(); ++i) {
        double s = std::hypot(e.lambda1[i], e.lambda2[i]);
        max_s = std::max(max_s, s);
      }
      c_scale = 0.5 * max_s;
    }
    res.c_used.push_back(c_scale);
    if (c_scale <= 0.0) continue;  // flat image at this scale: zero response

    const double inv_2b2 = 1.0 / (2.0 * cfg.beta * cfg.beta);
    const double inv_2c2 = 1.0 / (2.0 * c_scale * c_scale);
    for (size_t i = 0; i < res.vmap.size(); ++i) {
      double l1 = e.lambda1[i], l2 = e.lambda2[i];
      if (l2 >= 0.0) continue;  // positive branch rejected; l2 == 0 undefined blobness
      double rb = std::abs(l1) / std::abs(l2);
      double s2 = l1 * l1 + l2 * l2;
      double v = std::exp(-rb * rb * inv_2b2) * (1.0 - std::exp(-s2 * inv_2c2));
      if (v > res.vmap[i]) res.vmap[i] = v;
    }
  }
  return res;
}

// Depth-wise concatenation (R, G, B, VMAP); values pass through unchanged.
inline Tensor build_4channel(const Tensor& rgb, const Tensor& vmap) {
  require(rgb.rank() == 3 && rgb.dim(0) == 3, ErrorKind::ShapeMismatch,
          "expected (3,h,w) color tensor");
  require(vmap.rank() == 2 && vmap.dim(0) == rgb.dim(1) && vmap.dim(1) == rgb.dim(2),
          ErrorKind::ShapeMismatch, "vmap spatial shape must match rgb");
  const int h = rgb.dim(1), w = rgb.dim(2);
  Tensor out({4, h, w});
  std::copy(rgb.vec().begin(), rgb.vec().end(), out.vec().begin());
  std::copy(vmap.vec().begin(), vmap.vec().end(),
            out.vec().begin() + static_cast<long>(3) * h * w);
  return out;
}

// ---------------------------------------------------------------- storage
// VMAPs persist as single-channel 16-bit PNG with value = round(65535 * v).

inline void save_vmap(const std::string& path, const Tensor& vmap) {
  require(vmap.rank() == 2, ErrorKind::ShapeMismatch, "vmap must be (h,w)");
  ImageU16 img;
  img.h = vmap.dim(0);
  img.w = vmap.dim(1);
  img.data.resize(vmap.size());
  for (size_t i = 0; i < vmap.size(); ++i)
    img.data[i] = static_cast<uint16_t>(std::lround(std::clamp(vmap[i], 0.0, 1.0) * 65535.0));
  write_png_gray16(path, img);
}

inline Tensor load_vmap(const std::string& path) {
  ImageU16 img = read_image_gray16(path);
  Tensor t({img.h, img.w});
  for (size_t i = 0; i < img.data.size(); ++i) t[i] = img.data[i] / 65535.0;
  return t;
}

}  // namespace ropnet
