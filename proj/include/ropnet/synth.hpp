#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ropnet/core/error.hpp"
#include "ropnet/core/rng.hpp"
#include "ropnet/dataset.hpp"
#include "ropnet/io/image_io.hpp"

namespace ropnet {

// Procedural fundus-like image generator. Labels are exact by construction:
// severity controls demarcation-ridge rendering and metadata ranges, the
// plus flag controls vessel tortuosity amplitude.

// Tortuosity amplitude (pixels at 640-wide reference) above which a spec is
// allowed to carry plus = true.
constexpr double kPlusTortuosityAmpMin = 4.0;

struct SynthesisSpec {
  int broad_class = 0;  // 0..3
  bool plus = false;
  int dg_code = 0;
  int width = 640, height = 480;

  double ridge_radius = 0.65;    // fraction of aperture radius
  double ridge_width = 6.0;      // pixels at reference width
  double ridge_contrast = 0.0;   // 0 disables the ridge
  int vessel_branches = 6;
  double base_curvature = 0.35;  // radians of sweep along a branch
  double tortuosity_amp = 1.5;   // perpendicular wiggle, pixels at reference
  double tortuosity_freq = 3.0;  // cycles per branch
  double noise_level = 0.02;
  uint64_t seed = 0;
  std::array<double, 3> metadata{};  // GA, BW, PA

  void validate() const {
    require(broad_class >= 0 && broad_class <= 3, ErrorKind::InvalidParameter,
            "broad_class must be in [0,3]");
    require(!plus || tortuosity_amp >= kPlusTortuosityAmpMin, ErrorKind::InvalidParameter,
            "plus specs require tortuosity amplitude >= threshold");
    require(broad_class != 2 || ridge_contrast > 0.0, ErrorKind::InvalidParameter,
            "severe specs require a ridge");
    require(width >= 64 && height >= 64, ErrorKind::InvalidParameter, "image too small");
  }
};

struct SynthGroundTruth {
  double cx = 0, cy = 0, aperture_r = 0;
  double disc_x = 0, disc_y = 0;
  bool has_ridge = false;
  double ridge_r = 0, ridge_theta0 = 0, ridge_half_angle = 0;
  std::vector<std::pair<double, double>> vessel_centerline;  // (y, x) samples
};

struct SynthImage {
  ImageU8 pixels;
  SynthGroundTruth truth;
};

namespace detail {

inline double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Stamp a soft disc into a max-combined coverage buffer.
inline void stamp(std::vector<float>& buf, int h, int w, double cy, double cx,
                  double radius, double strength) {
  int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double d = std::hypot(y - cy, x - cx);
      double cov = smoothstep01(radius + 0.5 - d);  // ~1 inside, 0 outside
      float v = static_cast<float>(strength * cov);
      auto& cell = buf[static_cast<size_t>(y) * w + x];
      if (v > cell) cell = v;
    }
}

}  // namespace detail

inline SynthImage generate(const SynthesisSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int h = spec.height, w = spec.width;
  const double scale = w / 640.0;  // geometry parameters are at 640-wide reference

  SynthImage out;
  out.pixels.h = h;
  out.pixels.w = w;
  out.pixels.c = 3;
  out.pixels.data.assign(static_cast<size_t>(h) * w * 3, 0);

  SynthGroundTruth& gt = out.truth;
  gt.cx = w / 2.0 + rng.uniform(-6, 6) * scale;
  gt.cy = h / 2.0 + rng.uniform(-6, 6) * scale;
  gt.aperture_r = 0.46 * std::min(h, w) * rng.uniform(0.96, 1.0);

  // Optic disc sits off-center; vessels radiate from it.
  double disc_angle = rng.uniform(-0.35, 0.35) + (rng.bernoulli(0.5) ? 0.0 : M_PI);
  gt.disc_x = gt.cx + 0.5 * gt.aperture_r * std::cos(disc_angle);
  gt.disc_y = gt.cy + 0.5 * gt.aperture_r * std::sin(disc_angle) * 0.6;
  double disc_r = 0.11 * gt.aperture_r;

  std::vector<float> base_r(static_cast<size_t>(h) * w, 0.f);
  std::vector<float> base_g(base_r.size(), 0.f);
  std::vector<float> base_b(base_r.size(), 0.f);

  // Background disc with radial falloff, mottled pigmentation and the optic
  // disc highlight. Mottling gives the RGB channels texture that carries no
  // diagnostic signal.
  double mphase1 = rng.uniform(0, 2 * M_PI), mphase2 = rng.uniform(0, 2 * M_PI);
  double mfreq1 = rng.uniform(4.0, 7.0), mfreq2 = rng.uniform(9.0, 14.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double d = std::hypot(y - gt.cy, x - gt.cx);
      if (d > gt.aperture_r) continue;
      size_t i = static_cast<size_t>(y) * w + x;
      double fall = 1.0 - 0.35 * (d / gt.aperture_r) * (d / gt.aperture_r);
      double u = x / static_cast<double>(w), v = y / static_cast<double>(h);
      double mottle = 0.05 * std::sin(mfreq1 * u * 2 * M_PI + mphase1) *
                          std::cos(mfreq1 * v * 2 * M_PI + mphase2) +
                      0.03 * std::sin(mfreq2 * (u + v) * M_PI + mphase2);
      double dd = std::hypot(y - gt.disc_y, x - gt.disc_x);
      double disc = detail::smoothstep01((disc_r - dd) / (0.35 * disc_r) + 0.5);
      base_r[i] = static_cast<float>(std::clamp(0.80 * fall + mottle + 0.20 * disc, 0.0, 1.0));
      base_g[i] = static_cast<float>(std::clamp(0.42 * fall + 0.8 * mottle + 0.45 * disc, 0.0, 1.0));
      base_b[i] = static_cast<float>(std::clamp(0.22 * fall + 0.6 * mottle + 0.40 * disc, 0.0, 1.0));
    }

  // Vessel tree: radial branches from the optic disc with sum-of-sinusoid
  // perpendicular displacement; the amplitude is the plus-controlling knob.
  std::vector<float> vessel(base_r.size(), 0.f);
  const double branch_len = 0.95 * gt.aperture_r;
  for (int b = 0; b < spec.vessel_branches; ++b) {
    double theta0 = 2.0 * M_PI * b / spec.vessel_branches + rng.uniform(-0.25, 0.25);
    double curve = spec.base_curvature * rng.uniform(0.6, 1.4) * (rng.bernoulli(0.5) ? 1 : -1);
    double phi1 = rng.uniform(0, 2 * M_PI), phi2 = rng.uniform(0, 2 * M_PI);
    double amp = spec.tortuosity_amp * rng.uniform(0.85, 1.15) * scale;
    double freq = spec.tortuosity_freq * rng.uniform(0.9, 1.1);
    double th0 = rng.uniform(2.3, 3.2) * scale;
    int child_at = -1;
    double sub_len = branch_len * rng.uniform(0.85, 1.0);
    const int steps = std::max(32, static_cast<int>(sub_len / (0.75 * scale)));
    for (int s = 0; s <= steps; ++s) {
      double t = static_cast<double>(s) / steps;
      double theta = theta0 + curve * t;
      double rho = t * sub_len;
      double px = gt.disc_x + rho * std::cos(theta);
      double py = gt.disc_y + rho * std::sin(theta);
      // perpendicular wiggle, anchored at the disc
      double ramp = std::min(1.0, 3.0 * t);
      double disp = ramp * (amp * std::sin(2 * M_PI * freq * t + phi1) +
                            0.45 * amp * std::sin(2 * M_PI * 2.7 * freq * t + phi2));
      px += disp * -std::sin(theta);
      py += disp * std::cos(theta);
      if (std::hypot(py - gt.cy, px - gt.cx) > gt.aperture_r - 2) break;
      double th = th0 * (1.0 - 0.55 * t);
      detail::stamp(vessel, h, w, py, px, th, 0.85);
      if (s % 3 == 0) gt.vessel_centerline.emplace_back(py, px);
      if (child_at < 0 && t > 0.45) child_at = s;
    }
    // one child branch halfway out, thinner and shorter
    if (child_at >= 0) {
      double t0 = static_cast<double>(child_at) / steps;
      double theta_c = theta0 + curve * t0 + (rng.bernoulli(0.5) ? 0.5 : -0.5) + rng.uniform(-0.15, 0.15);
      double rho0 = t0 * sub_len;
      double cx0 = gt.disc_x + rho0 * std::cos(theta0 + curve * t0);
      double cy0 = gt.disc_y + rho0 * std::sin(theta0 + curve * t0);
      double clen = 0.45 * sub_len;
      double cphi = rng.uniform(0, 2 * M_PI);
      const int csteps = std::max(16, static_cast<int>(clen / (0.75 * scale)));
      for (int s = 0; s <= csteps; ++s) {
        double t = static_cast<double>(s) / csteps;
        double px = cx0 + clen * t * std::cos(theta_c);
        double py = cy0 + clen * t * std::sin(theta_c);
        double ramp = std::min(1.0, 3.0 * t);
        double disp = ramp * 0.8 * amp * std::sin(2 * M_PI * freq * t + cphi);
        px += disp * -std::sin(theta_c);
        py += disp * std::cos(theta_c);
        if (std::hypot(py - gt.cy, px - gt.cx) > gt.aperture_r - 2) break;
        detail::stamp(vessel, h, w, py, px, 0.7 * th0 * (1.0 - 0.5 * t), 0.8);
        if (s % 3 == 0) gt.vessel_centerline.emplace_back(py, px);
      }
    }
  }

  // Demarcation ridge arc (structural classes), centered on the optic disc
  // and facing away from it.
  if (spec.ridge_contrast > 0.0) {
    gt.has_ridge = true;
    gt.ridge_r = spec.ridge_radius * gt.aperture_r;
    gt.ridge_theta0 = disc_angle + M_PI + rng.uniform(-0.3, 0.3);
    gt.ridge_half_angle = rng.uniform(0.55, 0.85);
    double width_px = spec.ridge_width * scale;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double d = std::hypot(y - gt.cy, x - gt.cx);
        if (d > gt.aperture_r) continue;
        double dr = std::hypot(y - gt.disc_y, x - gt.disc_x);
        double band = std::abs(dr - gt.ridge_r);
        if (band > width_px) continue;
        double ang = std::atan2(y - gt.disc_y, x - gt.disc_x);
        double dang = std::remainder(ang - gt.ridge_theta0, 2 * M_PI);
        if (std::abs(dang) > gt.ridge_half_angle) continue;
        double prof = detail::smoothstep01(1.0 - band / width_px) *
                      detail::smoothstep01(1.0 - std::abs(dang) / gt.ridge_half_angle + 0.15);
        size_t i = static_cast<size_t>(y) * w + x;
        float lift = static_cast<float>(spec.ridge_contrast * prof);
        base_r[i] = std::min(1.f, base_r[i] + lift);
        base_g[i] = std::min(1.f, base_g[i] + lift);
        base_b[i] = std::min(1.f, base_b[i] + 0.8f * lift);
      }
  }

  // Other pathology: scattered hemorrhage-like dark blobs.
  if (spec.broad_class == 3) {
    int blobs = rng.uniform_int(3, 6);
    for (int k = 0; k < blobs; ++k) {
      double ang = rng.uniform(0, 2 * M_PI);
      double rad = rng.uniform(0.15, 0.8) * gt.aperture_r;
      double by = gt.cy + rad * std::sin(ang);
      double bx = gt.cx + rad * std::cos(ang);
      double br = rng.uniform(8, 20) * scale;
      for (int y = std::max(0, static_cast<int>(by - br - 2));
           y <= std::min(h - 1, static_cast<int>(by + br + 2)); ++y)
        for (int x = std::max(0, static_cast<int>(bx - br - 2));
             x <= std::min(w - 1, static_cast<int>(bx + br + 2)); ++x) {
          double d = std::hypot(y - by, x - bx);
          double cov = detail::smoothstep01((br - d) / (0.4 * br) + 0.3);
          if (cov <= 0) continue;
          size_t i = static_cast<size_t>(y) * w + x;
          base_r[i] = static_cast<float>(base_r[i] * (1.0 - 0.40 * cov));
          base_g[i] = static_cast<float>(base_g[i] * (1.0 - 0.75 * cov));
          base_b[i] = static_cast<float>(base_b[i] * (1.0 - 0.70 * cov));
        }
    }
  }

  // Compose vessels (dark, strongest in green for vascular contrast), add
  // noise, quantize.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      size_t i = static_cast<size_t>(y) * w + x;
      double d = std::hypot(y - gt.cy, x - gt.cx);
      if (d > gt.aperture_r) continue;
      double vd = vessel[i];
      double r = base_r[i] * (1.0 - 0.45 * vd);
      double g = base_g[i] * (1.0 - 0.78 * vd);
      double b = base_b[i] * (1.0 - 0.60 * vd);
      r += rng.normal(0, spec.noise_level);
      g += rng.normal(0, spec.noise_level);
      b += rng.normal(0, spec.noise_level);
      out.pixels.at(y, x, 0) = static_cast<uint8_t>(std::lround(std::clamp(r, 0.0, 1.0) * 255));
      out.pixels.at(y, x, 1) = static_cast<uint8_t>(std::lround(std::clamp(g, 0.0, 1.0) * 255));
      out.pixels.at(y, x, 2) = static_cast<uint8_t>(std::lround(std::clamp(b, 0.0, 1.0) * 255));
    }
  return out;
}

// --------------------------------------------------------------- cohorts

struct CohortConfig {
  int n_patients = 40;
  std::array<double, 4> class_mix{0.5, 0.15, 0.2, 0.15};
  uint64_t seed = 1234;
  double severe_plus_fraction = 1.0;   // fraction of severe patients with plus
  int min_images = 4, max_images = 12;
};

// Largest-remainder apportionment of patients to classes.
inline std::array<int, 4> cohort_class_counts(int n, const std::array<double, 4>& mix) {
  std::array<int, 4> counts{};
  std::array<double, 4> quota{};
  int assigned = 0;
  for (int c = 0; c < 4; ++c) {
    quota[static_cast<size_t>(c)] = n * mix[static_cast<size_t>(c)];
    counts[static_cast<size_t>(c)] = static_cast<int>(std::floor(quota[static_cast<size_t>(c)]));
    assigned += counts[static_cast<size_t>(c)];
  }
  std::array<int, 4> order{0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return quota[static_cast<size_t>(a)] - std::floor(quota[static_cast<size_t>(a)]) >
           quota[static_cast<size_t>(b)] - std::floor(quota[static_cast<size_t>(b)]);
  });
  for (int i = 0; assigned < n; ++assigned, ++i)
    counts[static_cast<size_t>(order[static_cast<size_t>(i % 4)])] += 1;
  return counts;
}

namespace detail {

inline int dg_code_for_class(int cls, Rng& rng) {
  switch (cls) {
    case 0: return 0;
    case 1: {
      const int codes[] = {1, 2, 9};
      return codes[rng.uniform_int(0, 2)];
    }
    case 2: return rng.uniform_int(3, 8);
    default: return rng.uniform_int(10, 13);
  }
}

}  // namespace detail

// Generates a full cohort in the dataset manifest layout: one directory per
// patient with manifest.jsonl and PNG images. Metadata correlates with
// severity (overlapping ranges, so it is informative but not separating).
inline std::vector<PatientRecord> generate_cohort(const CohortConfig& cfg,
                                                  const std::filesystem::path& out_root) {
  require(cfg.n_patients >= 10, ErrorKind::InvalidParameter, "need at least 10 patients");
  std::filesystem::create_directories(out_root);
  auto counts = cohort_class_counts(cfg.n_patients, cfg.class_mix);

  std::vector<int> patient_class;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < counts[static_cast<size_t>(c)]; ++i) patient_class.push_back(c);
  Rng order_rng(Rng::derive(cfg.seed, 0xC0504Bu));
  shuffle(patient_class, order_rng);

  std::vector<PatientRecord> patients;
  for (int pi = 0; pi < cfg.n_patients; ++pi) {
    Rng prng(Rng::derive(cfg.seed, 0x1000 + static_cast<uint64_t>(pi)));
    int cls = patient_class[static_cast<size_t>(pi)];

    PatientRecord rec;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%04d", pi);
    rec.patient_id = buf;

    switch (cls) {  // GA ranges overlap between neighbouring severities
      case 0: rec.ga_weeks = prng.uniform(32.0, 40.0); break;
      case 1: rec.ga_weeks = prng.uniform(28.0, 36.0); break;
      case 2: rec.ga_weeks = prng.uniform(24.0, 29.0); break;
      default: rec.ga_weeks = prng.uniform(26.0, 40.0); break;
    }
    rec.bw_grams = std::clamp((rec.ga_weeks - 20.0) * 170.0 + prng.normal(0, 180.0),
                              500.0, 4500.0);

    bool patient_plus = cls == 2 && prng.uniform() < cfg.severe_plus_fraction;
    int n_images = prng.uniform_int(cfg.min_images, cfg.max_images);
    bool large_camera = prng.bernoulli(0.5);

    std::filesystem::path pdir = out_root / rec.patient_id;
    std::filesystem::create_directories(pdir);

    int plus_images = 0;
    for (int ii = 0; ii < n_images; ++ii) {
      // first image always carries the patient's defining class
      int img_cls = (ii == 0 || prng.uniform() < 0.65) ? cls : 0;
      bool img_plus = patient_plus && img_cls == 2 && (plus_images == 0 || prng.uniform() < 0.7);
      if (img_plus) ++plus_images;

      SynthesisSpec spec;
      spec.broad_class = img_cls;
      spec.plus = img_plus;
      spec.dg_code = detail::dg_code_for_class(img_cls, prng);
      spec.width = large_camera ? 1024 : 640;
      spec.height = large_camera ? 768 : 480;
      spec.seed = Rng::derive(cfg.seed, (static_cast<uint64_t>(pi) << 20) | static_cast<uint64_t>(ii));
      spec.vessel_branches = prng.uniform_int(5, 7);
      spec.tortuosity_amp = img_plus ? prng.uniform(5.5, 8.5) : prng.uniform(0.6, 2.2);
      spec.tortuosity_freq = img_plus ? prng.uniform(3.5, 5.0) : prng.uniform(2.0, 3.0);
      spec.noise_level = 0.02;
      if (img_cls == 1) {
        spec.ridge_contrast = prng.uniform(0.10, 0.16);
        spec.ridge_width = prng.uniform(3.5, 5.0);
        spec.ridge_radius = prng.uniform(0.55, 0.75);
      } else if (img_cls == 2) {
        spec.ridge_contrast = prng.uniform(0.28, 0.40);
        spec.ridge_width = prng.uniform(6.0, 9.0);
        spec.ridge_radius = prng.uniform(0.55, 0.75);
      }
      spec.metadata = {rec.ga_weeks, rec.bw_grams, rec.ga_weeks + prng.uniform(6.0, 18.0)};

      SynthImage img = generate(spec);
      char fname[32];
      std::snprintf(fname, sizeof(fname), "img_%03d.png", ii);
      write_png_rgb8((pdir / fname).string(), img.pixels);

      ImageRecord ir;
      ir.image_file = fname;
      ir.pa_weeks = spec.metadata[2];
      ir.dg_code = spec.dg_code;
      ir.plus = img_plus;
      rec.images.push_back(ir);
    }
    write_patient_manifest(rec, pdir);
    patients.push_back(std::move(rec));
  }
  return patients;
}

}  // namespace ropnet
