#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "ropnet/core/error.hpp"
#include "ropnet/core/rng.hpp"
#include "ropnet/core/tensor.hpp"
#include "ropnet/vesselness.hpp"

namespace ropnet {

using json = nlohmann::json;

// ------------------------------------------------------------------ records

struct ImageRecord {
  std::string image_file;
  double pa_weeks = 0.0;
  int dg_code = 0;
  bool plus = false;
};

struct PatientRecord {
  std::string patient_id;
  double ga_weeks = 0.0;
  double bw_grams = 0.0;
  std::vector<ImageRecord> images;
  std::string dir;  // directory holding the image files

  void validate() const {
    require(ga_weeks > 20.0 && ga_weeks < 45.0, ErrorKind::InvalidParameter,
            "gestational age out of range for patient " + patient_id);
    require(bw_grams > 300.0 && bw_grams < 6000.0, ErrorKind::InvalidParameter,
            "birth weight out of range for patient " + patient_id);
    for (const auto& im : images)
      require(im.dg_code >= 0 && im.dg_code <= 13, ErrorKind::InvalidParameter,
              "dg code out of range for patient " + patient_id);
  }
};

// Clinical severity remapping: granular diagnosis codes collapse onto the
// 4-class scale {Normal, Mild/Treated, Severe, Other}.
inline int remap_diagnosis(int dg_code) {
  require(dg_code >= 0 && dg_code <= 13, ErrorKind::InvalidParameter,
          "dg code must be in [0,13]");
  switch (dg_code) {
    case 0: return 0;
    case 1: case 2: case 9: return 1;
    case 3: case 4: case 5: case 6: case 7: case 8: return 2;
    default: return 3;  // 10..13
  }
}

struct DiagnosisLabel {
  int broad_class = 0;
  bool plus = false;
};

// --------------------------------------------------------------- metadata

// Per-feature (mean, std) for (GA, BW, PA), computed from the training split
// only. Image-level: GA/BW repeat per image, PA varies per exam.
struct MetadataStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{};
};

struct ClinicalVector {
  std::array<double, 3> values{};
};

inline MetadataStats compute_metadata_stats(const std::vector<PatientRecord>& patients) {
  MetadataStats st;
  std::array<double, 3> sum{}, sum2{};
  size_t n = 0;
  for (const auto& p : patients)
    for (const auto& im : p.images) {
      const std::array<double, 3> v{p.ga_weeks, p.bw_grams, im.pa_weeks};
      for (int i = 0; i < 3; ++i) {
        sum[static_cast<size_t>(i)] += v[static_cast<size_t>(i)];
        sum2[static_cast<size_t>(i)] += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
      }
      ++n;
    }
  require(n > 1, ErrorKind::InvalidParameter, "need at least two images for stats");
  for (int i = 0; i < 3; ++i) {
    size_t ii = static_cast<size_t>(i);
    st.mean[ii] = sum[ii] / static_cast<double>(n);
    double var = sum2[ii] / static_cast<double>(n) - st.mean[ii] * st.mean[ii];
    st.stddev[ii] = std::sqrt(std::max(var, 0.0));
  }
  return st;
}

inline ClinicalVector normalize_metadata(const std::array<double, 3>& raw,
                                         const MetadataStats& st) {
  ClinicalVector out;
  for (int i = 0; i < 3; ++i) {
    size_t ii = static_cast<size_t>(i);
    require(std::isfinite(raw[ii]), ErrorKind::MissingMetadata,
            "clinical feature missing or non-finite");
    require(st.stddev[ii] > 0.0, ErrorKind::InvalidParameter,
            "metadata stddev must be positive");
    out.values[ii] = (raw[ii] - st.mean[ii]) / st.stddev[ii];
  }
  return out;
}

inline std::array<double, 3> denormalize_metadata(const ClinicalVector& v,
                                                  const MetadataStats& st) {
  std::array<double, 3> out;
  for (int i = 0; i < 3; ++i) {
    size_t ii = static_cast<size_t>(i);
    out[ii] = v.values[ii] * st.stddev[ii] + st.mean[ii];
  }
  return out;
}

// ------------------------------------------------------------------ splits

constexpr int kNumFolds = 5;

struct SplitAssignment {
  std::vector<std::string> test_patients;
  std::array<std::pair<std::vector<std::string>, std::vector<std::string>>, kNumFolds>
      folds;  // (train, val) patient ids
  std::vector<std::string> warnings;
};

namespace detail {

struct StratumKey {
  int worst_class = 0;
  bool plus = false;
  bool operator<(const StratumKey& o) const {
    return std::tie(worst_class, plus) < std::tie(o.worst_class, o.plus);
  }
};

inline StratumKey stratum_of(const PatientRecord& p) {
  StratumKey k;
  for (const auto& im : p.images) {
    k.worst_class = std::max(k.worst_class, remap_diagnosis(im.dg_code));
    k.plus = k.plus || im.plus;
  }
  return k;
}

}  // namespace detail

// Held-out count: one test patient for every ten retained in the training
// pool (round(N/11)), which reproduces the published 17 / 171 partition of a
// 188-patient cohort. A plain round(N/10) would not.
inline int held_out_test_count(int n_patients) {
  return static_cast<int>(std::lround(n_patients / 11.0));
}

inline SplitAssignment make_splits(const std::vector<PatientRecord>& patients,
                                   uint64_t seed) {
  require(patients.size() >= 10, ErrorKind::InvalidParameter,
          "need at least 10 patients to split");
  SplitAssignment out;

  // Group patients by stratum (worst broad class, plus prevalence), with a
  // seed-shuffled deterministic order inside each stratum.
  std::map<detail::StratumKey, std::vector<std::string>> strata;
  for (const auto& p : patients) strata[detail::stratum_of(p)].push_back(p.patient_id);
  {
    uint64_t k = 0;
    for (auto& [key, ids] : strata) {
      std::sort(ids.begin(), ids.end());
      Rng rng(Rng::derive(seed, 0x5eed0000 + k++));
      shuffle(ids, rng);
    }
  }

  const int n = static_cast<int>(patients.size());
  const int n_test = held_out_test_count(n);

  // Largest-remainder test allocation per stratum, then ensure every
  // non-empty stratum contributes at least one test patient when capacity
  // allows, stealing from the largest allocations.
  std::vector<detail::StratumKey> keys;
  for (const auto& [key, ids] : strata) keys.push_back(key);
  std::vector<int> alloc(keys.size(), 0);
  {
    std::vector<double> quota(keys.size());
    int assigned = 0;
    for (size_t i = 0; i < keys.size(); ++i) {
      quota[i] = static_cast<double>(n_test) * strata[keys[i]].size() / n;
      alloc[i] = static_cast<int>(std::floor(quota[i]));
      assigned += alloc[i];
    }
    std::vector<size_t> order(keys.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return quota[a] - std::floor(quota[a]) > quota[b] - std::floor(quota[b]);
    });
    for (size_t i = 0; assigned < n_test && i < order.size(); ++i, ++assigned)
      alloc[order[i]] += 1;
    if (n_test >= static_cast<int>(keys.size())) {
      for (size_t i = 0; i < keys.size(); ++i) {
        while (alloc[i] == 0) {
          size_t donor = std::max_element(alloc.begin(), alloc.end()) - alloc.begin();
          if (alloc[donor] <= 1) break;
          alloc[donor] -= 1;
          alloc[i] += 1;
        }
      }
    }
    for (size_t i = 0; i < keys.size(); ++i)
      alloc[i] = std::min(alloc[i], static_cast<int>(strata[keys[i]].size()));
  }

  std::map<std::string, int> fold_of;  // -1 = test
  for (size_t i = 0; i < keys.size(); ++i) {
    auto& ids = strata[keys[i]];
    for (int t = 0; t < alloc[i]; ++t) {
      out.test_patients.push_back(ids.back());
      fold_of[ids.back()] = -1;
      ids.pop_back();
    }
  }
  std::sort(out.test_patients.begin(), out.test_patients.end());

  // Stratified group 5-fold over the remaining pool: each stratum deals its
  // patients to the currently-smallest fold.
  std::array<int, kNumFolds> fold_sizes{};
  for (size_t i = 0; i < keys.size(); ++i) {
    const auto& ids = strata[keys[i]];
    if (!ids.empty() && ids.size() < kNumFolds)
      out.warnings.push_back("stratum (class " + std::to_string(keys[i].worst_class) +
                             ", plus " + std::to_string(keys[i].plus) +
                             ") has fewer patients than folds; best-effort assignment");
    for (const auto& id : ids) {
      int best = 0;
      for (int f = 1; f < kNumFolds; ++f)
        if (fold_sizes[static_cast<size_t>(f)] < fold_sizes[static_cast<size_t>(best)]) best = f;
      fold_of[id] = best;
      fold_sizes[static_cast<size_t>(best)] += 1;
    }
  }

  for (int f = 0; f < kNumFolds; ++f) {
    auto& [train, val] = out.folds[static_cast<size_t>(f)];
    for (const auto& p : patients) {
      int fo = fold_of.at(p.patient_id);
      if (fo == -1) continue;
      (fo == f ? val : train).push_back(p.patient_id);
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
  }
  return out;
}

// -------------------------------------------------------------------- bags

struct PatchProvenance {
  int y = 0, x = 0, size = 0;
  std::string image_id;
};

struct InstanceBag {
  std::vector<Tensor> patches;  // each (4, ps, ps) or (3, ps, ps) in RGB mode
  bool bag_label = false;
  std::vector<PatchProvenance> provenance;
};

struct BagConfig {
  int n_patches = 24;
  int patch_size = 224;
  int stride = 112;
  bool include_vmap = true;  // false: RGB-only ablation stem
};

// Top-K windows of a stride-aligned grid ranked by vesselness mass, ties (and
// the all-zero degenerate case) resolved by row-major window coordinates.
inline InstanceBag build_bag(const Tensor& rgb, const Tensor& vmap,
                             const BagConfig& cfg, const std::string& image_id) {
  require(rgb.rank() == 3 && rgb.dim(0) == 3, ErrorKind::ShapeMismatch,
          "expected (3,h,w) texture image");
  const int h = rgb.dim(1), w = rgb.dim(2);
  require(vmap.dim(0) == h && vmap.dim(1) == w, ErrorKind::ShapeMismatch,
          "vmap must match texture image");
  require(h >= cfg.patch_size && w >= cfg.patch_size, ErrorKind::InvalidParameter,
          "image smaller than patch size");

  struct Cand { double mass; int y, x; };
  std::vector<Cand> cands;
  for (int y = 0; y + cfg.patch_size <= h; y += cfg.stride)
    for (int x = 0; x + cfg.patch_size <= w; x += cfg.stride) {
      double mass = 0.0;
      for (int yy = y; yy < y + cfg.patch_size; ++yy)
        for (int xx = x; xx < x + cfg.patch_size; ++xx) mass += vmap.at(yy, xx);
      cands.push_back({mass, y, x});
    }
  require(static_cast<int>(cands.size()) >= cfg.n_patches, ErrorKind::InvalidParameter,
          "grid yields fewer windows than requested patches");
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.mass != b.mass) return a.mass > b.mass;
    return std::tie(a.y, a.x) < std::tie(b.y, b.x);
  });

  InstanceBag bag;
  for (int k = 0; k < cfg.n_patches; ++k) {
    const Cand& c = cands[static_cast<size_t>(k)];
    const int ps = cfg.patch_size;
    Tensor patch({cfg.include_vmap ? 4 : 3, ps, ps});
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          patch.at(ch, y, x) = rgb.at(ch, c.y + y, c.x + x);
    if (cfg.include_vmap)
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          patch.at(3, y, x) = vmap.at(c.y + y, c.x + x);
    bag.patches.push_back(std::move(patch));
    bag.provenance.push_back({c.y, c.x, ps, image_id});
  }
  return bag;
}

// ------------------------------------------------------------ manifest I/O
// One folder per patient; each folder holds manifest.jsonl with one record
// per image: patient_id, ga_weeks, bw_grams, image_file, pa_weeks, dg_code,
// plus. The synthetic generator emits the same layout.

inline PatientRecord parse_patient_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  require(in.good(), ErrorKind::MissingInput,
          "cannot open manifest: " + manifest_path.string());
  PatientRecord p;
  p.dir = manifest_path.parent_path().string();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      raise(ErrorKind::InvalidConfig, manifest_path.string() + ":" +
            std::to_string(line_no) + ": " + e.what());
    }
    for (const char* field :
         {"patient_id", "ga_weeks", "bw_grams", "image_file", "pa_weeks", "dg_code", "plus"})
      require(j.contains(field), ErrorKind::MissingMetadata,
              manifest_path.string() + ": missing field '" + field + "'");
    if (p.patient_id.empty()) {
      p.patient_id = j["patient_id"].get<std::string>();
      p.ga_weeks = j["ga_weeks"].get<double>();
      p.bw_grams = j["bw_grams"].get<double>();
    }
    ImageRecord im;
    im.image_file = j["image_file"].get<std::string>();
    im.pa_weeks = j["pa_weeks"].get<double>();
    im.dg_code = j["dg_code"].get<int>();
    im.plus = j["plus"].get<bool>();
    p.images.push_back(std::move(im));
  }
  require(!p.images.empty(), ErrorKind::MissingInput,
          "empty manifest: " + manifest_path.string());
  p.validate();
  return p;
}

inline std::vector<PatientRecord> load_cohort(const std::filesystem::path& root) {
  require(std::filesystem::is_directory(root), ErrorKind::MissingInput,
          "dataset root not found: " + root.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root))
    if (e.is_directory() && std::filesystem::exists(e.path() / "manifest.jsonl"))
      dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  require(!dirs.empty(), ErrorKind::MissingInput,
          "no patient manifests under: " + root.string());
  std::vector<PatientRecord> patients;
  patients.reserve(dirs.size());
  for (const auto& d : dirs) patients.push_back(parse_patient_manifest(d / "manifest.jsonl"));
  return patients;
}

inline void write_patient_manifest(const PatientRecord& p,
                                   const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "manifest.jsonl");
  require(out.good(), ErrorKind::Runtime, "cannot write manifest under " + dir.string());
  for (const auto& im : p.images) {
    json j;
    j["patient_id"] = p.patient_id;
    j["ga_weeks"] = p.ga_weeks;
    j["bw_grams"] = p.bw_grams;
    j["image_file"] = im.image_file;
    j["pa_weeks"] = im.pa_weeks;
    j["dg_code"] = im.dg_code;
    j["plus"] = im.plus;
    out << j.dump() << "\n";
  }
}

}  // namespace ropnet
