#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace ropnet {

// Deterministic RNG used for every stochastic choice in the pipeline.
// Distribution sampling is hand-rolled on top of mt19937_64 so that draw
// sequences are stable across standard-library implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] via rejection-free modulo over a wide range.
  int uniform_int(int lo, int hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; one value per call, cached pair discarded for simplicity.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  // Derive an independent stream, e.g. per patient or per image. SplitMix64
  // scrambling keeps child streams decorrelated from sequential keys.
  static uint64_t derive(uint64_t seed, uint64_t key) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (key + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  Rng child(uint64_t key) const { return Rng(derive(state_seed_, key)); }

  explicit Rng(uint64_t seed, bool) : gen_(seed) {}

 private:
  std::mt19937_64 gen_;
  uint64_t state_seed_ = 0;

 public:
  // Factory that remembers the seed so child() derivations are reproducible
  // regardless of how many draws the parent has made.
  static Rng seeded(uint64_t seed) {
    Rng r(seed);
    r.state_seed_ = seed;
    return r;
  }
};

// Fisher-Yates with our own uniform_int for cross-platform determinism.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace ropnet
