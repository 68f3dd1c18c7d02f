#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "ropnet/core/error.hpp"
#include "ropnet/core/tensor.hpp"
#include "ropnet/io/image_io.hpp"

namespace ropnet {

// ----------------------------------------------------------------- types

struct RawFundusImage {
  ImageU8 pixels;  // interleaved RGB
  std::string source_id;

  void validate() const {
    require(pixels.c == 3, ErrorKind::InvalidParameter,
            "fundus image must have exactly 3 channels");
    require(pixels.h >= 64 && pixels.w >= 64, ErrorKind::InvalidParameter,
            "fundus image must be at least 64x64");
  }
};

struct ApertureMask {
  int h = 0, w = 0;
  std::vector<uint8_t> fg;  // 1 = retinal foreground

  bool at(int y, int x) const { return fg[static_cast<size_t>(y) * w + x] != 0; }
  size_t count() const {
    size_t n = 0;
    for (uint8_t v : fg) n += v;
    return n;
  }
};

struct PadRecord {
  int top = 0, bottom = 0, left = 0, right = 0;
  bool operator==(const PadRecord&) const = default;
};

enum class ResolutionTag { native, structure_384, texture_768 };

inline int resolution_of(ResolutionTag tag) {
  switch (tag) {
    case ResolutionTag::structure_384: return 384;
    case ResolutionTag::texture_768: return 768;
    default: return 0;
  }
}

// Contrast-normalized working image. Values in [0,1]; masked-out background
// is exactly zero.
struct CleanFundusImage {
  Tensor pixels;  // (3,h,w)
  ResolutionTag tag = ResolutionTag::native;
  PadRecord pad;
  std::string source_id;
};

struct EnhanceParams {
  double gamma = 1.5;
  double clahe_clip = 2.0;
  int clahe_tiles_x = 8;
  int clahe_tiles_y = 8;
  bool clahe_per_channel = false;  // default: lightness channel
};

struct PreprocessParams {
  int threshold = 10;  // on 0..255 luminance
  EnhanceParams enhance;
};

// ------------------------------------------------------------- operations

inline std::vector<double> luminance_255(const ImageU8& img) {
  std::vector<double> lum(static_cast<size_t>(img.h) * img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      lum[static_cast<size_t>(y) * img.w + x] =
          0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
  return lum;
}

// Binary erosion with the all-ones 3x3 structuring element. Out-of-frame
// neighbors count as background, so a full-frame mask loses its border ring.
inline std::vector<uint8_t> erode3x3(const std::vector<uint8_t>& in, int h, int w) {
  std::vector<uint8_t> out(in.size(), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      uint8_t keep = 1;
      for (int dy = -1; dy <= 1 && keep; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w ||
              !in[static_cast<size_t>(ny) * w + nx]) {
            keep = 0;
            break;
          }
        }
      }
      out[static_cast<size_t>(y) * w + x] = keep;
    }
  }
  return out;
}

inline ApertureMask compute_aperture_mask(const RawFundusImage& img, int threshold) {
  img.validate();
  require(threshold >= 0 && threshold <= 255, ErrorKind::InvalidParameter,
          "threshold must be in [0,255]");
  const int h = img.pixels.h, w = img.pixels.w;
  std::vector<double> lum = luminance_255(img.pixels);
  std::vector<uint8_t> thr(lum.size());
  for (size_t i = 0; i < lum.size(); ++i) thr[i] = lum[i] > threshold ? 1 : 0;
  ApertureMask mask;
  mask.h = h;
  mask.w = w;
  mask.fg = erode3x3(thr, h, w);
  require(mask.count() > 0, ErrorKind::DegenerateImage,
          "aperture mask empty after erosion: " + img.source_id);
  return mask;
}

inline void apply_mask(Tensor& planar, const ApertureMask& mask) {
  require(planar.dim(1) == mask.h && planar.dim(2) == mask.w,
          ErrorKind::ShapeMismatch, "mask does not align with image");
  for (int c = 0; c < planar.dim(0); ++c)
    for (int y = 0; y < mask.h; ++y)
      for (int x = 0; x < mask.w; ++x)
        if (!mask.at(y, x)) planar.at(c, y, x) = 0.0;
}

// --------------------------------------------------------------- CLAHE
// Tile-based clipped histogram equalization over [0,1] values. Histograms
// are built from in-mask pixels only and the mapping is applied only inside
// the mask; tiles without foreground fall back to the identity map.

namespace detail {

constexpr int kClaheBins = 256;

struct TileMap {
  std::array<double, kClaheBins> lut;
  bool identity = true;
};

inline TileMap clahe_tile_map(const std::vector<float>& values, double clip_limit) {
  TileMap tm;
  for (int i = 0; i < kClaheBins; ++i) tm.lut[i] = (i + 0.5) / kClaheBins;
  if (values.empty()) return tm;

  std::array<double, kClaheBins> hist{};
  for (float v : values) {
    int b = std::clamp(static_cast<int>(v * kClaheBins), 0, kClaheBins - 1);
    hist[b] += 1.0;
  }
  const double n = static_cast<double>(values.size());
  // Clip limit follows the usual convention: relative to the uniform bin
  // occupancy, never below one count.
  double limit = std::max(1.0, clip_limit * n / kClaheBins);
  double excess = 0.0;
  for (auto& hv : hist) {
    if (hv > limit) {
      excess += hv - limit;
      hv = limit;
    }
  }
  double bonus = excess / kClaheBins;
  for (auto& hv : hist) hv += bonus;

  double cdf = 0.0;
  for (int i = 0; i < kClaheBins; ++i) {
    cdf += hist[i];
    tm.lut[i] = cdf / n;
  }
  tm.identity = false;
  return tm;
}

inline void clahe_channel(std::vector<float>& chan, const ApertureMask& mask,
                          int h, int w, double clip, int tiles_x, int tiles_y) {
  tiles_x = std::max(1, std::min(tiles_x, w));
  tiles_y = std::max(1, std::min(tiles_y, h));
  auto tile_of = [](int coord, int tiles, int extent) {
    return std::min(tiles - 1, coord * tiles / extent);
  };

  std::vector<TileMap> maps(static_cast<size_t>(tiles_x) * tiles_y);
  {
    std::vector<std::vector<float>> buckets(maps.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (mask.at(y, x)) {
          int t = tile_of(y, tiles_y, h) * tiles_x + tile_of(x, tiles_x, w);
          buckets[static_cast<size_t>(t)].push_back(chan[static_cast<size_t>(y) * w + x]);
        }
    for (size_t t = 0; t < maps.size(); ++t)
      maps[t] = clahe_tile_map(buckets[t], clip);
  }

  auto apply = [&](const TileMap& tm, double v) {
    int b = std::clamp(static_cast<int>(v * kClaheBins), 0, kClaheBins - 1);
    return tm.identity ? v : tm.lut[b];
  };

  const double tile_h = static_cast<double>(h) / tiles_y;
  const double tile_w = static_cast<double>(w) / tiles_x;
  for (int y = 0; y < h; ++y) {
    double fy = (y + 0.5) / tile_h - 0.5;
    int ty0 = std::clamp(static_cast<int>(std::floor(fy)), 0, tiles_y - 1);
    int ty1 = std::min(ty0 + 1, tiles_y - 1);
    double wy = std::clamp(fy - ty0, 0.0, 1.0);
    for (int x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      double fx = (x + 0.5) / tile_w - 0.5;
      int tx0 = std::clamp(static_cast<int>(std::floor(fx)), 0, tiles_x - 1);
      int tx1 = std::min(tx0 + 1, tiles_x - 1);
      double wx = std::clamp(fx - tx0, 0.0, 1.0);
      double v = chan[static_cast<size_t>(y) * w + x];
      double m00 = apply(maps[static_cast<size_t>(ty0) * tiles_x + tx0], v);
      double m01 = apply(maps[static_cast<size_t>(ty0) * tiles_x + tx1], v);
      double m10 = apply(maps[static_cast<size_t>(ty1) * tiles_x + tx0], v);
      double m11 = apply(maps[static_cast<size_t>(ty1) * tiles_x + tx1], v);
      double out = (1 - wy) * ((1 - wx) * m00 + wx * m01) + wy * ((1 - wx) * m10 + wx * m11);
      chan[static_cast<size_t>(y) * w + x] = static_cast<float>(std::clamp(out, 0.0, 1.0));
    }
  }
}

}  // namespace detail

// Gamma correction (out = in^gamma on [0,1]) followed by CLAHE, both applied
// inside the aperture only. Default CLAHE mode equalizes a luminance channel
// and rescales RGB proportionally; per-channel mode is available for ablation.
inline CleanFundusImage enhance(const CleanFundusImage& img, const ApertureMask& mask,
                                const EnhanceParams& p) {
  require(p.gamma > 0.0, ErrorKind::InvalidParameter, "gamma must be positive");
  require(img.pixels.dim(1) == mask.h && img.pixels.dim(2) == mask.w,
          ErrorKind::ShapeMismatch, "mask does not align with image");
  const int h = mask.h, w = mask.w;
  CleanFundusImage out = img;

  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double v = mask.at(y, x) ? std::pow(out.pixels.at(c, y, x), p.gamma) : 0.0;
        out.pixels.at(c, y, x) = v;
      }

  if (p.clahe_per_channel) {
    for (int c = 0; c < 3; ++c) {
      std::vector<float> chan(static_cast<size_t>(h) * w);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          chan[static_cast<size_t>(y) * w + x] = static_cast<float>(out.pixels.at(c, y, x));
      detail::clahe_channel(chan, mask, h, w, p.clahe_clip, p.clahe_tiles_x, p.clahe_tiles_y);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (mask.at(y, x))
            out.pixels.at(c, y, x) = chan[static_cast<size_t>(y) * w + x];
    }
  } else {
    std::vector<float> lum(static_cast<size_t>(h) * w, 0.f);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        lum[static_cast<size_t>(y) * w + x] = static_cast<float>(
            0.299 * out.pixels.at(0, y, x) + 0.587 * out.pixels.at(1, y, x) +
            0.114 * out.pixels.at(2, y, x));
    std::vector<float> eq = lum;
    detail::clahe_channel(eq, mask, h, w, p.clahe_clip, p.clahe_tiles_x, p.clahe_tiles_y);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!mask.at(y, x)) continue;
        size_t i = static_cast<size_t>(y) * w + x;
        double scale = lum[i] > 1e-6f ? eq[i] / lum[i] : 0.0;
        for (int c = 0; c < 3; ++c)
          out.pixels.at(c, y, x) = std::clamp(out.pixels.at(c, y, x) * scale, 0.0, 1.0);
      }
  }
  return out;
}

// ------------------------------------------------------------- resampling

// Separable triangle-filter resampling. The kernel support scales with the
// downsample factor (antialiasing); at scale <= 1 it reduces to plain
// bilinear interpolation.
inline Tensor resample_bilinear(const Tensor& src, int out_h, int out_w) {
  const int c = src.dim(0), in_h = src.dim(1), in_w = src.dim(2);
  auto axis_weights = [](int in_n, int out_n) {
    double scale = static_cast<double>(in_n) / out_n;
    double support = std::max(1.0, scale);
    std::vector<std::pair<int, std::vector<double>>> rows(static_cast<size_t>(out_n));
    for (int o = 0; o < out_n; ++o) {
      double center = (o + 0.5) * scale - 0.5;
      int lo = static_cast<int>(std::ceil(center - support));
      int hi = static_cast<int>(std::floor(center + support));
      lo = std::max(lo, 0);
      hi = std::min(hi, in_n - 1);
      std::vector<double> wts;
      double total = 0.0;
      for (int i = lo; i <= hi; ++i) {
        double d = std::abs(i - center) / support;
        double wv = d < 1.0 ? 1.0 - d : 0.0;
        wts.push_back(wv);
        total += wv;
      }
      if (total <= 0.0) {  // degenerate tail: nearest sample
        int nearest = std::clamp(static_cast<int>(std::lround(center)), 0, in_n - 1);
        rows[static_cast<size_t>(o)] = {nearest, {1.0}};
        continue;
      }
      for (auto& wv : wts) wv /= total;
      rows[static_cast<size_t>(o)] = {lo, std::move(wts)};
    }
    return rows;
  };

  auto wx = axis_weights(in_w, out_w);
  auto wy = axis_weights(in_h, out_h);

  Tensor tmp({c, in_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < in_h; ++y)
      for (int o = 0; o < out_w; ++o) {
        const auto& [lo, wts] = wx[static_cast<size_t>(o)];
        double acc = 0.0;
        for (size_t k = 0; k < wts.size(); ++k)
          acc += wts[k] * src.at(ch, y, lo + static_cast<int>(k));
        tmp.at(ch, y, o) = acc;
      }
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int o = 0; o < out_h; ++o) {
      const auto& [lo, wts] = wy[static_cast<size_t>(o)];
      for (int x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (size_t k = 0; k < wts.size(); ++k)
          acc += wts[k] * tmp.at(ch, lo + static_cast<int>(k), x);
        out.at(ch, o, x) = acc;
      }
    }
  return out;
}

// Letterbox to square with zero fill, then resample to target x target.
inline CleanFundusImage resize_preserve_geometry(const CleanFundusImage& img, int target) {
  require(target == 384 || target == 768, ErrorKind::InvalidParameter,
          "target resolution must be 384 or 768");
  const int c = img.pixels.dim(0), h = img.pixels.dim(1), w = img.pixels.dim(2);
  const int side = std::max(h, w);
  PadRecord pad;
  pad.top = (side - h) / 2;
  pad.bottom = side - h - pad.top;
  pad.left = (side - w) / 2;
  pad.right = side - w - pad.left;

  CleanFundusImage out;
  out.source_id = img.source_id;
  out.pad = pad;
  out.tag = target == 384 ? ResolutionTag::structure_384 : ResolutionTag::texture_768;

  if (pad.top == 0 && pad.bottom == 0 && pad.left == 0 && pad.right == 0 && side == target) {
    out.pixels = img.pixels;
    return out;
  }
  Tensor boxed({c, side, side}, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        boxed.at(ch, y + pad.top, x + pad.left) = img.pixels.at(ch, y, x);
  out.pixels = side == target ? std::move(boxed) : resample_bilinear(boxed, target, target);
  for (auto& v : out.pixels.vec()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// Full per-image pipeline: threshold -> erode -> mask -> gamma -> CLAHE ->
// letterbox -> resample, emitting both working resolutions.
struct PreprocessResult {
  ApertureMask mask;
  CleanFundusImage structure_384;
  CleanFundusImage texture_768;
};

inline PreprocessResult preprocess_image(const RawFundusImage& raw,
                                         const PreprocessParams& p) {
  PreprocessResult r;
  r.mask = compute_aperture_mask(raw, p.threshold);
  CleanFundusImage native;
  native.pixels = to_planar(raw.pixels);
  native.tag = ResolutionTag::native;
  native.source_id = raw.source_id;
  apply_mask(native.pixels, r.mask);
  CleanFundusImage enhanced = enhance(native, r.mask, p.enhance);
  r.structure_384 = resize_preserve_geometry(enhanced, 384);
  r.texture_768 = resize_preserve_geometry(enhanced, 768);
  return r;
}

}  // namespace ropnet
